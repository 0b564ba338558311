
# Repository package initialization
