"""
Command groups for the gtforge CLI.

Every module here except base_command is loaded dynamically and registers
its group through a module-level setup(cli) function.
"""
