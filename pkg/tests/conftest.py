pytest_plugins = ["fixtures.engine_fixtures"]
