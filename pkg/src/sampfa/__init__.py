"""Scale-adaptive multi-task power flow analysis toolkit."""

__version__ = "0.1.0"
