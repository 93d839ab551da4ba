"""Online extrinsic calibration between an event camera and a LiDAR."""

__version__ = "0.1.0"
