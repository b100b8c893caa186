"""Exception hierarchy shared by all modules."""


class CapeForestError(Exception):
    """Base class for every error raised by the package."""


class InputError(CapeForestError):
    """Invalid input data or configuration (CLI exit code 2)."""


class EstimationError(CapeForestError):
    """Estimation could not proceed on valid input (CLI exit code 1)."""


# dataset

class MissingColumn(InputError):
    def __init__(self, column):
        super().__init__(f"missing required column: {column!r}")
        self.column = column


class ParseFailure(InputError):
    def __init__(self, row, column, value):
        super().__init__(f"row {row}: cannot parse {column}={value!r} as a number")
        self.row = row
        self.column = column


class InvariantViolation(InputError):
    def __init__(self, row, rule):
        super().__init__(f"row {row}: {rule}")
        self.row = row
        self.rule = rule


class PanelValidationError(InputError):
    """Collects every row-level failure found while loading a panel."""

    def __init__(self, problems):
        self.problems = list(problems)
        lines = [str(p) for p in self.problems[:20]]
        if len(self.problems) > 20:
            lines.append(f"... and {len(self.problems) - 20} more")
        super().__init__("panel validation failed:\n" + "\n".join(lines))


class UnknownUnitId(InputError):
    def __init__(self, unit_id):
        super().__init__(f"unknown unit id: {unit_id!r}")
        self.unit_id = unit_id


class NoTreatedUnits(EstimationError):
    def __init__(self, k):
        super().__init__(f"no treated unit reaches policy year {k}")
        self.k = k


class EmptyControlGroup(EstimationError):
    pass


# forests

class TooFewRows(EstimationError):
    pass


class NoOobTrees(EstimationError):
    def __init__(self, i):
        super().__init__(
            f"training row {i} appears in every subsample; lower subsample_fraction"
        )
        self.i = i


class NoResidualVariation(EstimationError):
    pass


class InfeasibleLeafConstraints(EstimationError):
    pass


class ZeroLocalPriceVariation(EstimationError):
    pass


class BagConfigInvalid(EstimationError):
    pass


# analysis

class DegenerateGroups(EstimationError):
    pass


class RankDeficientDesign(EstimationError):
    pass


class EmptyBand(EstimationError):
    pass


class EmptyGroup(EstimationError):
    pass


class NonFiniteInput(InputError):
    pass


class MissingCostColumns(InputError):
    pass


class SingularDesign(EstimationError):
    pass


class SpecInvalid(InputError):
    pass


# theory

class InvalidCurvature(InputError):
    pass


class NotAtOptimum(EstimationError):
    pass


class SecondOrderFailure(EstimationError):
    pass


class NoInteriorOptimum(EstimationError):
    pass


class NonConcave(EstimationError):
    pass
