import logging
import time

import click

logger = logging.getLogger("kavi.cli")


class CommandLoggingMiddleware:
    '''Wraps a click command callback and logs "<command> <exit-code> <ms>ms".'''

    def __init__(self, name: str, callback):
        self.name = name
        self.callback = callback

    def __call__(self, *args, **kwargs):
        start = time.perf_counter()
        code = 0
        try:
            return self.callback(*args, **kwargs)
        except click.exceptions.Exit as e:
            code = e.exit_code
            raise
        except click.ClickException as e:
            code = e.exit_code
            raise
        except SystemExit as e:
            code = e.code if isinstance(e.code, int) else 1
            raise
        except BaseException:
            code = 1
            raise
        finally:
            duration_ms = (time.perf_counter() - start) * 1000
            logger.info("%s %d %.1fms", self.name, code, duration_ms)


def log_command(command: click.Command) -> click.Command:
    command.callback = CommandLoggingMiddleware(command.name, command.callback)
    return command
