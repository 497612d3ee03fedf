# Initialize tests package
