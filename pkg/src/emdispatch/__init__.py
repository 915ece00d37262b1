"""Human-in-the-loop emergency disposal: key-node prediction over a simulated
work environment plus constraint-masked task-insertion scheduling."""

__version__ = "0.1.0"
