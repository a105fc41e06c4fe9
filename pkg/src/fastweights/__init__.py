"""Fast-weight recurrent cells with a self-contained training harness."""

from fastweights.tape import Tape, grad_check

__version__ = "0.1.0"

__all__ = ["Tape", "grad_check", "__version__"]
