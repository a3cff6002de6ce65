import logging
import logging.handlers
import multiprocessing.util
import queue
import sys
import threading
from contextlib import contextmanager

import httpx

from config import config

_listener = None
_queue_handler = None


class RunContextFilter(logging.Filter):
    '''Stamps the identity of the run in progress (mode, seed, config hash) on every record.'''

    def __init__(self):
        super().__init__()
        self.context = {}

    def filter(self, record):
        record.run = dict(self.context)
        return True


_run_filter = RunContextFilter()


@contextmanager
def run_context(**fields):
    previous = _run_filter.context
    _run_filter.context = {**previous, **fields}
    try:
        yield
    finally:
        _run_filter.context = previous


class OpenObserveHandler(logging.Handler):
    '''Ships JSON log entries to an OpenObserve stream in batches. A record's
    `extra_data` dict (e.g. an epoch's loss breakdown) is merged into its entry.'''

    def __init__(self, endpoint, token, org="default", stream="kavi",
                 batch_size=10, flush_interval=5.0):
        super().__init__()
        self.url = f"{endpoint}/api/{org}/{stream}/_json"
        self.token = token
        self.batch_size = batch_size
        self.flush_interval = flush_interval
        self._buffer = []
        self._lock = threading.Lock()
        self._client = httpx.Client(timeout=10)
        self._start_flush_timer()

    def _start_flush_timer(self):
        self._timer = threading.Timer(self.flush_interval, self._timed_flush)
        self._timer.daemon = True
        self._timer.start()

    def _timed_flush(self):
        self.flush()
        self._start_flush_timer()

    def entry(self, record: logging.LogRecord) -> dict:
        entry = {
            "level": record.levelname,
            "message": self.format(record),
            "_timestamp": int(record.created * 1_000_000),
            "logger": record.name,
            "function": record.funcName,
            "line": record.lineno,
        }
        if isinstance(getattr(record, "run", None), dict):
            entry.update(record.run)
        if isinstance(getattr(record, "extra_data", None), dict):
            entry.update(record.extra_data)
        return entry

    def emit(self, record):
        with self._lock:
            self._buffer.append(self.entry(record))
            if len(self._buffer) >= self.batch_size:
                self._send()

    def _send(self):
        if not self._buffer:
            return
        batch = self._buffer[:]
        self._buffer.clear()
        try:
            resp = self._client.post(
                self.url,
                json=batch,
                headers={
                    "Authorization": f"Basic {self.token}",
                    "Content-Type": "application/json",
                },
            )
            resp.raise_for_status()
        except httpx.HTTPError as e:
            # a lost batch must never interrupt a training run
            sys.stderr.write(f"log shipping failed ({len(batch)} entries dropped): {e}\n")

    def flush(self):
        with self._lock:
            self._send()

    def close(self):
        self._timer.cancel()
        self.flush()
        self._client.close()
        super().close()


def setup_logging(level=logging.INFO):
    '''Route every "kavi.*" record through a queue to stdout and, when enabled, OpenObserve.'''
    global _listener, _queue_handler
    if _listener is not None:
        shutdown_logging()

    root = logging.getLogger()
    root.setLevel(level)

    formatter = logging.Formatter(
        "[%(asctime)s] %(levelname)s %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    stream_handler = logging.StreamHandler(stream=sys.stdout)
    stream_handler.setFormatter(formatter)

    handlers = [stream_handler]

    if getattr(config, "LOGGING_ENABLED", False):
        token = getattr(config, "OPENOBSERVE_TOKEN", None)
        endpoint = getattr(config, "OPENOBSERVE_ENDPOINT", None)
        if token and endpoint:
            oo_handler = OpenObserveHandler(endpoint, token)
            oo_handler.setFormatter(formatter)
            handlers.append(oo_handler)

    log_queue = queue.Queue(-1)
    _queue_handler = logging.handlers.QueueHandler(log_queue)
    _queue_handler.addFilter(_run_filter)
    root.addHandler(_queue_handler)

    _listener = logging.handlers.QueueListener(
        log_queue, *handlers, respect_handler_level=True
    )
    _listener.start()


def shutdown_logging():
    global _listener, _queue_handler
    if _listener:
        _listener.stop()
        for handler in _listener.handlers:
            handler.close()
        _listener = None
    if _queue_handler:
        logging.getLogger().removeHandler(_queue_handler)
        _queue_handler = None


def setup_worker_logging(level=logging.INFO):
    '''Logging for a pool worker. A queue handler inherited through fork has no
    listener thread in this process, so it is replaced and stopped at worker exit.'''
    global _listener, _queue_handler
    if _queue_handler is not None:
        logging.getLogger().removeHandler(_queue_handler)
    _listener = _queue_handler = None
    setup_logging(level)
    multiprocessing.util.Finalize(None, shutdown_logging, exitpriority=10)
