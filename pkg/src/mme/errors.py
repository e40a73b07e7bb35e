"""Exception types raised across the toolkit."""


class MmeError(Exception):
    """Base class for all toolkit errors."""


# --- documentation corpus ---

class MalformedRecord(MmeError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"malformed corpus record at line {line_no}: {reason}")


class DuplicateApi(MmeError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"duplicate api name: {name}")


# --- knowledge graph ---

class SchemaViolation(MmeError):
    pass


class InvalidTemplate(MmeError):
    def __init__(self, pattern, reason=""):
        self.pattern = pattern
        super().__init__(f"invalid relation template {pattern!r}: {reason}")


# --- graph embedding ---

class EmptyGraph(MmeError):
    pass


class UnknownEntity(MmeError):
    def __init__(self, entity_id):
        self.entity_id = entity_id
        super().__init__(f"unknown entity: {entity_id}")


# --- argument embedding ---

class EmptyResource(MmeError):
    pass


# --- sequence embedding ---

class EmptyTrace(MmeError):
    pass


# --- model ---

class ShapeMismatch(MmeError):
    pass


class InsufficientClass(MmeError):
    def __init__(self, family):
        self.family = family
        super().__init__(f"class (family={family}) has too few members to mirror")


class NonFiniteGradient(MmeError):
    pass


# --- evaluation ---

class EmptyTrain(MmeError):
    pass


class EmptyPool(MmeError):
    pass


class LengthMismatch(MmeError):
    pass


class NotNormalized(MmeError):
    pass


class TooFewSamples(MmeError):
    def __init__(self, family):
        self.family = family
        super().__init__(f"family {family} has fewer samples than groups")


# --- synthetic corpus ---

class MissingEdges(MmeError):
    pass
