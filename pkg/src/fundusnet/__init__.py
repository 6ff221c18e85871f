"""fundusnet: joint optic disc / cup segmentation and glaucoma screening
for retinal color fundus images.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    augment,
    checkpoint,
    dataset,
    losses,
    metrics,
    network,
    pipeline,
    postprocess,
    roi,
)
