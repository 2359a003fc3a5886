import logging
import threading
from colorama import Fore, Back, Style, init

# Initialize colorama
init(autoreset=True)

# Round tag is per thread: seeds may train side by side on executor threads
_round_state = threading.local()


def set_round(round_number: int) -> None:
    """Set the federated round shown in log lines of the calling thread"""
    _round_state.round = round_number


def current_round() -> int:
    return getattr(_round_state, "round", 0)


def round_tag() -> str:
    """Init before the first round closes, then Round:n"""
    round_number = current_round()
    label = "Init" if round_number == 0 else f"Round:{round_number}"
    return f"[{Fore.CYAN}{label}{Style.RESET_ALL}]"


class ColoredFormatter(logging.Formatter):
    """Formatter that colors levels and module names and tags the current round"""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.RED + Back.WHITE
    }

    MODULE_COLORS = {
        'federation': Fore.MAGENTA,
        'federation_server': Fore.MAGENTA,
        'silo_client': Fore.BLUE,
        'aggregation': Fore.YELLOW,
        'nn_engine': Fore.YELLOW,
        'datasets': Fore.BLUE,
        'metrics': Fore.GREEN,
        'analysis': Fore.GREEN,
        'main': Fore.WHITE,
        '__main__': Fore.WHITE
    }

    def _prefix(self, record: logging.LogRecord) -> str:
        module_name = record.name.split('.')[-1]
        module = f"{self.MODULE_COLORS.get(module_name, Fore.WHITE)}{module_name}{Style.RESET_ALL}"
        level = f"{self.COLORS.get(record.levelname, '')}{record.levelname}{Style.RESET_ALL}"
        return f"{self.formatTime(record, self.datefmt)} {round_tag()} - {module} - {level}"

    def format(self, record):
        message = f"{self._prefix(record)} - {record.getMessage()}"
        if record.exc_info and not record.exc_text:
            record.exc_text = self.formatException(record.exc_info)
        if record.exc_text:
            message = f"{message}\n{record.exc_text}"
        return message


def setup_logging(level: str = "INFO"):
    """Install the colored handler on the root logger"""
    handler = logging.StreamHandler()
    handler.setFormatter(ColoredFormatter(datefmt="%H:%M:%S"))

    root_logger = logging.getLogger()
    root_logger.handlers = []
    root_logger.addHandler(handler)
    root_logger.setLevel(level.upper())

    # uvicorn and httpx are chatty at INFO
    for noisy in ("httpx", "uvicorn.access"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
