from importlib.metadata import version

__version__ = version("nfcl-forecast")
