import sys

from uqcal import run_cli


def main():
    code, out, err = run_cli(sys.argv[1:])
    sys.stderr.write(err)
    sys.stdout.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
