"""Open transactional memory: action terms, a reference machine, a threaded
runtime and an opacity checker for recorded histories."""

__version__ = "0.1.0"
