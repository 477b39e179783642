"""SAR imaging of breathing targets with separation-based respiratory autofocus.

Modules, in processing order: :mod:`scene` (geometry and breathing model),
:mod:`simulator` (echo cube synthesis), :mod:`imaging` (backprojection),
:mod:`spatial` (range-angle separation), :mod:`tfsep` (STFT ridge mixture and
masking), :mod:`autofocus` (sharpness-driven phase estimation and fusion),
:mod:`evaluation` (points, RMSE, correlation) and :mod:`pipeline` (the
sliding-window driver behind the ``respfocus`` command).
"""

from .errors import RespFocusError

__version__ = "0.1.0"

__all__ = ["RespFocusError", "__version__"]
