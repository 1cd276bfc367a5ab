"""Multi-label activity recognition for newborn-resuscitation clips on a small numpy autodiff core."""

__version__ = "0.1.0"
