
# App package initialization
