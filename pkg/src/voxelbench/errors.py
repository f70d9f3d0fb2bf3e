"""Exception hierarchy.

``DataError`` subclasses signal bad inputs (exit code 2 on the command line);
everything else deriving from ``VoxelBenchError`` is a runtime failure.
"""


class VoxelBenchError(Exception):
    pass


class DataError(VoxelBenchError):
    pass


class FormatError(DataError):
    pass


class ManifestError(DataError):
    pass


class GeometryError(DataError):
    pass


class EmptyOrganError(DataError):
    def __init__(self, case_id, label):
        self.case_id = case_id
        self.label = label
        super().__init__(f"case {case_id!r}: no voxel carries organ label {label}")


class ShapeError(VoxelBenchError, ValueError):
    pass


class DegenerateTestError(VoxelBenchError, ValueError):
    pass


class TrainingError(VoxelBenchError):
    pass
