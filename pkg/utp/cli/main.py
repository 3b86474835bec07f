import json
import logging
from typing import Optional

import click
from pydantic import ValidationError

from utp import __version__
from utp.cli.handlers import data_handlers, evaluation_handlers, training_handlers
from utp.cli.utils.logger import setup_logger
from utp.core.exceptions import UTPError

logger = logging.getLogger(__name__)


def error_line(code: str, message: str) -> str:
    """One machine-parsable line per failure."""
    return f"error code={code} message={json.dumps(message)}"


class UTPGroup(click.Group):
    """Click group that reports package errors as one stderr line and exit status 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except UTPError as e:
            logger.debug("Command failed", exc_info=True)
            click.echo(error_line(e.code, str(e)), err=True)
        except ValidationError as e:
            click.echo(error_line("invalid_config", str(e).splitlines()[0]), err=True)
        except UnicodeDecodeError as e:
            click.echo(error_line("invalid_encoding", str(e)), err=True)
        except OSError as e:
            click.echo(error_line("io_error", str(e)), err=True)
        ctx.exit(1)


@click.group(cls=UTPGroup)
@click.version_option(__version__, prog_name="utp")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default: UTP_LOG_LEVEL)")
def cli(log_level: Optional[str]):
    """Table-text pretraining, retrieval and cell-selection QA at desk scale."""
    setup_logger(log_level)


# Data
cli.add_command(data_handlers.gen_synthetic)
cli.add_command(data_handlers.gen_qa)
cli.add_command(data_handlers.validate)

# Training
cli.add_command(training_handlers.pretrain)
cli.add_command(training_handlers.finetune_retrieval)
cli.add_command(training_handlers.finetune_qa)
cli.add_command(training_handlers.tau_sweep)
cli.add_command(training_handlers.ablate)
cli.add_command(training_handlers.hn_compare)

# Evaluation
cli.add_command(evaluation_handlers.eval_retrieval)
cli.add_command(evaluation_handlers.mine_negatives)
cli.add_command(evaluation_handlers.eval_qa)
cli.add_command(evaluation_handlers.gradcheck)


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
