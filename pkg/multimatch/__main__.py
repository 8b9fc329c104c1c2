"""Entry point for ``multimatch <command>`` and ``python -m multimatch``."""
import os
import sys


def main():
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'multimatch.settings')
    from django.core.management import execute_from_command_line

    argv = list(sys.argv)
    argv[0] = 'multimatch'
    execute_from_command_line(argv)


if __name__ == '__main__':
    main()
