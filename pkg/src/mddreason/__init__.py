"""Depression-screening reasoning pipeline at toy scale."""
__version__ = "0.1.0"
