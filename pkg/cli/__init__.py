"""Command-line subcommands: toy-corpus, mix, train, convert, eval, inspect."""
