import sys

from splitting_sampler import cli


def main():
    sys.exit(cli.main(sys.argv[1:]))


if __name__ == '__main__':
    main()
