"""LidarSphere package."""
