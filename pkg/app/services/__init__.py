
# Services package initialization
