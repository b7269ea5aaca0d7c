class DriverError(Exception):
    """The gold driver gave up on a request."""


class DeviceError(DriverError):
    """The device reported a failed job."""


class SizeMismatch(DriverError):
    """The device confirmed a different transfer size than it announced."""
