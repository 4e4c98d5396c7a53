"""Exception hierarchy shared by the library and the CLI.

Each class carries a short machine-readable ``code`` that the CLI prints on
failure paths.
"""


class IstsError(Exception):
    code = "ists-error"


class ArgumentError(IstsError, ValueError):
    code = "argument-error"


class BackendError(IstsError, RuntimeError):
    code = "backend-error"


class AttackUnsupported(IstsError, RuntimeError):
    code = "attack-unsupported"


class ConfigError(IstsError, ValueError):
    code = "config-error"


class KeyFileError(IstsError, ValueError):
    code = "key-error"
