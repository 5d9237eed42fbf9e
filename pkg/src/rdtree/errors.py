"""Exception hierarchy. ``code`` is the machine-readable tag printed by the CLI."""


class RDTreeError(Exception):
    code = "error"


class ArgumentError(RDTreeError, ValueError):
    code = "argument"


class DataError(RDTreeError):
    code = "data"


class SchemaError(DataError):
    code = "schema"


class ParseError(DataError):
    code = "parse"


class ValidationError(DataError):
    code = "validation"


class SupportError(DataError):
    code = "support"


class SplitError(DataError):
    code = "split"


class InsufficientDataError(RDTreeError):
    code = "insufficient_data"


class SingularDesignError(RDTreeError):
    code = "singular_design"


class SingularUpdateError(SingularDesignError):
    code = "singular_update"


class ClusterCountError(RDTreeError):
    code = "cluster_count"


class DegenerateFirstStageError(RDTreeError):
    code = "degenerate_first_stage"


class EmptyLeafError(RDTreeError):
    code = "empty_leaf"


class FitError(RDTreeError):
    code = "fit"


class CVError(FitError):
    code = "cv"


class EstimationError(RDTreeError):
    code = "estimation"
