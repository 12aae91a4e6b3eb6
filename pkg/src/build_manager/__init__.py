"""Self-hosted build manager.

Watches source repositories, schedules user-submitted and CI builds onto
a host pool, supervises the build processes with live logs and graceful
cancellation, and serves a static-HTML web dashboard. The compressed
build logs are the only durable record: the whole database can be
rebuilt from them.
"""

__version__ = "0.1.0"
