"""Document image dewarping with a predicted per-pixel displacement flow.

Modules:

- ``flow_core``: image, flow and mask types plus the ``.dfl`` flow format
- ``synthgen``: synthetic warped pages with exact ground-truth flow
- ``rectifier``: forward remapping by triangle rasterization
- ``losses``: training losses with analytic gradients and a gradient checker
- ``net``: the encoder/decoder flow network and its checkpoint format
- ``training``: deterministic training loop
- ``metrics``: MS-SSIM and local distortion
- ``cli``: the ``dewarpflow`` command
"""

__version__ = "0.1.0"
