"""Contact-implicit trajectory optimization for in-hand manipulation with rolling fingertips."""

__version__ = "0.1.0"
