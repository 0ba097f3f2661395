"""Transfer-operator identification and linear-programming controller synthesis."""

__version__ = "0.1.0"
