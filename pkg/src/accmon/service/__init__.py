"""Operation backend: ingest, persistence glue, supervision, API, alerts."""

from .alerts import (  # noqa: F401
    AlertChannel,
    AlertDispatcher,
    AlertKind,
    AlertMessage,
    DeliveryRecord,
    FileSink,
    WebhookSink,
)
from .api import ApiServer  # noqa: F401
from .app import EventHub, HouseEntry, Service, ServiceConfig  # noqa: F401
from .supervision import GatewayState, GatewayStatus, Supervision  # noqa: F401
