import os

from django.core.management.base import BaseCommand, CommandError

from .config import RunConfig
from .exceptions import FlowRestoreError, EXIT_RUNTIME_ERROR
from .logs import flowrestore_logger


class BaseRunCommand(BaseCommand):
    """
    Shared plumbing of every pipeline command: resolve the run config from
    settings defaults, `--config` and command flags, turn the error hierarchy
    into exit codes, and echo the resolved config into each output directory.
    """
    # argparse dest -> run config key
    config_flags = {}

    def add_arguments(self, parser):
        parser.add_argument('--config', default='', help='flat `key = value` run config file')
        parser.add_argument('--workdir', default='.', help='root that relative paths resolve against')
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        self.options = options
        try:
            self.run_config = self.resolve_config(options)
            flowrestore_logger.info(
                '%s: config %s', self.command_name, self.run_config.fingerprint()
            )
            return self.run()
        except FlowRestoreError as exc:
            flowrestore_logger.error('%s failed: %s', self.command_name, exc)
            raise CommandError(str(exc), returncode=exc.exit_code)
        except OSError as exc:
            flowrestore_logger.error('%s failed: %s', self.command_name, exc)
            raise CommandError(str(exc), returncode=EXIT_RUNTIME_ERROR)

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def resolve_config(self, options):
        overrides = {
            key: options.get(dest)
            for dest, key in self.config_flags.items()
        }
        config_path = self.workpath(options['config']) if options.get('config') else None
        return RunConfig.resolve(path=config_path, overrides=overrides)

    def workpath(self, path):
        if not path or os.path.isabs(path):
            return path
        return os.path.join(self.options.get('workdir') or '.', path)

    def prepare_output(self, directory):
        """ create the output directory and make it self-describing """
        os.makedirs(directory, exist_ok=True)
        self.run_config.echo(directory)
        return directory

    def run(self):
        """ command body """
        raise NotImplementedError

    def say(self, message):
        self.stdout.write(message)

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))

    def warn(self, message):
        flowrestore_logger.warning(message)
        self.stderr.write(self.style.WARNING(message))
