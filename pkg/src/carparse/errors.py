"""Exception types shared across the toolkit."""


class CarParseError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class EmptyInput(CarParseError):
    code = "empty_input"


class ShapeMismatch(CarParseError):
    code = "shape_mismatch"


class InconsistentTopology(CarParseError):
    code = "inconsistent_topology"


class DegenerateConfiguration(CarParseError):
    code = "degenerate_configuration"


class NonConvergence(CarParseError):
    code = "non_convergence"


class InsufficientNodes(CarParseError):
    code = "insufficient_nodes"


class SingularNormalEquations(CarParseError):
    code = "singular_normal_equations"


class BehindCamera(CarParseError):
    code = "behind_camera"


class OutOfRange(CarParseError):
    code = "out_of_range"


class EmptyBox(CarParseError):
    code = "empty_box"


class PlacementFailure(CarParseError):
    code = "placement_failure"


class TooFewParts(CarParseError):
    code = "too_few_parts"


class EmptyGroundTruth(CarParseError):
    code = "empty_ground_truth"


class ConfigError(CarParseError):
    code = "config_error"


class FormatError(CarParseError):
    """Malformed file on disk (bad magic, wrong version, unsupported primitive)."""

    code = "format_error"
