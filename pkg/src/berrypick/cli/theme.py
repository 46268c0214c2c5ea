# Console styles shared by the command handlers
GREEN = "green"
YELLOW = "yellow"
RED = "bold red"
