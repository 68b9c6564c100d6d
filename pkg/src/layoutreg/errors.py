"""Exception hierarchy.

Each exception carries a ``category`` used by the CLI to pick an exit code
and to print a machine-readable error line.
"""


class LayoutRegError(Exception):
    category = "numerical"


class ConfigError(LayoutRegError):
    category = "config"


class InvalidSpec(ConfigError):
    pass


class IoError(LayoutRegError):
    category = "io"


class ParseError(IoError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class MissingNormals(ParseError):
    pass


class DegenerateInput(LayoutRegError):
    pass


class InsufficientCorrespondences(LayoutRegError):
    pass


class NotConnected(LayoutRegError):
    pass


class SingularSystem(LayoutRegError):
    pass


class NoPlanes(LayoutRegError):
    pass


class LayoutNotFound(LayoutRegError):
    pass


class EmptyCloud(LayoutRegError):
    pass


class LengthMismatch(LayoutRegError):
    pass
