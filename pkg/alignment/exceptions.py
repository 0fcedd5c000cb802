"""
Exceptions raised by the alignment services.

Management commands translate these into CommandError with the exit code
carried by the exception: 2 for unreadable input, 3 for violated invariants.
"""


class AlignmentError(Exception):
    """Base class for every error raised by the alignment app."""

    exit_code = 1


class SingularBError(AlignmentError):
    """Cholesky pivot of B fell below 1e-12 * trace(B)."""

    exit_code = 3


class ConstructionInvariantViolated(AlignmentError):
    """The 600-cell did not come out as 120 vertices, 600 cells, 330 hemisphere cells."""

    exit_code = 3


class DegenerateCellError(AlignmentError):
    """A tetrahedron's vertex matrix is numerically rank deficient."""

    exit_code = 3


class InternalBoundError(AlignmentError):
    """No subset produced a feasible bound (singletons always should)."""

    exit_code = 3


class NoCandidatesError(AlignmentError):
    """Rotational branch and bound returned no candidate rotation."""

    exit_code = 3


class EmptyCloudError(AlignmentError):
    """A point cloud (or a cloud needed to build a box) has no points."""

    exit_code = 2


class CloudParseError(AlignmentError):
    """
    A cloud file could not be parsed.

    Args:
        message: What went wrong
        path: File being read
        line: 1-based line number for text formats
        offset: Byte offset for binary payloads
    """

    exit_code = 2

    def __init__(self, message, path=None, line=None, offset=None):
        self.path = path
        self.line = line
        self.offset = offset
        location = ''
        if line is not None:
            location = f' (line {line})'
        elif offset is not None:
            location = f' (byte {offset})'
        prefix = f'{path}: ' if path else ''
        super().__init__(f'{prefix}{message}{location}')


class UnsupportedFormatError(AlignmentError):
    """File extension or PLY format variant that the reader does not handle."""

    exit_code = 2


class CloudIOError(AlignmentError):
    """Reading or writing a file failed at the OS level."""

    exit_code = 1
