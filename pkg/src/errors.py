"""Error types shared by the pipeline stages."""

from __future__ import annotations


class LidarSphereError(Exception):
    exit_code = 1


class ConfigError(LidarSphereError, ValueError):
    exit_code = 2


class DataError(LidarSphereError, ValueError):
    exit_code = 3


class PlyFormatError(DataError):
    pass


class InvariantError(LidarSphereError, RuntimeError):
    exit_code = 4
