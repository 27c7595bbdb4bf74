import argparse
import logging
import traceback

import config
from app.errors import ConfigurationError, UsageError

logger = logging.getLogger("CLI")

LOG_FORMAT = "[%(name)s] %(message)s"


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser que levanta UsageError em vez de encerrar o processo."""

    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


class CommandApp:
    def __init__(self, parser):
        self.parser = parser

    def run(self, argv):
        """Executa um subcomando.

        Returns:
            int: 0 sucesso, 1 erro de uso/configuração, 2 falha em execução.
        """
        try:
            args = self.parser.parse_args(argv)
            if not getattr(args, "handler", None):
                raise UsageError(f"nenhum subcomando informado\n\n{self.parser.format_help()}")
            args.handler(args)
            return 0
        except SystemExit as exc:
            # --help
            return int(exc.code or 0)
        except (UsageError, ConfigurationError) as exc:
            logger.error(f"❌ {exc}")
            return 1
        except Exception as exc:
            traceback.print_exc()
            logger.error(f"❌ Falha: {exc}")
            return 2


def configure_logging(level=None):
    logging.basicConfig(level=level or config.LOG_LEVEL, format=LOG_FORMAT)


def create_app():
    configure_logging()
    from app.controllers import data_controller, evaluation_controller, reports_controller, training_controller

    parser = CommandParser(prog="capsie", description="CapsIE: pré-treino e avaliação de cápsulas invariantes/equivariantes")
    subparsers = parser.add_subparsers(dest="command", parser_class=CommandParser)

    # Registrar todos os controllers
    for controller in (data_controller, training_controller, evaluation_controller, reports_controller):
        controller.register(subparsers)

    return CommandApp(parser)
