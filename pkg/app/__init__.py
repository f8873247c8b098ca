"""Application package: REST service, configuration and the ``cwm`` command line."""
