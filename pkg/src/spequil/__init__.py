"""Global solver for bilevel programs with spatial price equilibrium followers."""

__version__ = "0.1.0"
