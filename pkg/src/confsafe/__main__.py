"""Makes ConfSafe executable."""
if "__main__" == __name__:
    from confsafe.script import confsafe

    confsafe()
