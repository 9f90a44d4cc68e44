"""One module per graphmerge subcommand; each exposes run(config, paths, ...)"""
