"""Sample-based regularization for transfer learning, on a small numpy autodiff."""

__version__ = "0.1.0"
