# Shared plumbing for the expertsim management commands: error-to-exit-code
# mapping, option parsing helpers and engine construction.

import logging

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from expertsim.exceptions import ConfigError, ExpertSimError
from expertsim.forms import form_errors
from expertsim.topology import Bitwidth, MoEConfig, load_config

logger = logging.getLogger('expertsim.commands')

USAGE_ERROR = 2
DOMAIN_ERROR = 3


def parse_list(raw, cast, what):
    """Parse a comma-separated option value ('0.01,0.02')."""
    if raw is None:
        return None
    try:
        values = [cast(part.strip()) for part in str(raw).split(',') if part.strip()]
    except ValueError:
        raise CommandError(f'invalid {what} list: {raw!r}', returncode=USAGE_ERROR) from None
    if not values:
        raise CommandError(f'empty {what} list', returncode=USAGE_ERROR)
    return values


def check_form(form_class, data):
    form = form_class(data=data)
    if not form.is_valid():
        raise CommandError('; '.join(form_errors(form)), returncode=USAGE_ERROR)
    return form.cleaned_data


class ExpertSimCommand(BaseCommand):
    """Base command: usage/config errors exit 2, domain errors exit 3."""

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        django_error = parser.error

        def error(message):
            try:
                django_error(message)
            except CommandError as e:
                raise CommandError(str(e), returncode=USAGE_ERROR) from None

        parser.error = error
        return parser

    def add_no_timestamp(self, parser):
        parser.add_argument('--no-timestamp', action='store_true',
                            help='Omit generated_at so identical runs write identical files')

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except FileNotFoundError as e:
            raise CommandError(f'file not found: {e.filename}', returncode=USAGE_ERROR) from e
        except ConfigError as e:
            raise CommandError(str(e), returncode=USAGE_ERROR) from e
        except ExpertSimError as e:
            logger.warning('%s failed: %s', self.__class__.__module__.rsplit('.', 1)[-1], e)
            raise CommandError(str(e), returncode=DOMAIN_ERROR) from e

    def run(self, **options):
        raise NotImplementedError

    def usage_error(self, message):
        raise CommandError(message, returncode=USAGE_ERROR)

    def load_config(self, path) -> MoEConfig:
        return load_config(path) if path else MoEConfig()

    def report_written(self, path, what='report'):
        self.stdout.write(self.style.SUCCESS(f'{what} written to {path}'))


def parse_bitwidth(raw, allow_plan=False):
    if allow_plan and str(raw).lower() == 'plan':
        return 'plan'
    try:
        return Bitwidth.parse(raw)
    except ValueError as e:
        raise CommandError(str(e), returncode=USAGE_ERROR) from None


def default_slots():
    return settings.EDGEMOE_BUFFER_SLOTS
