# Initialize app package
