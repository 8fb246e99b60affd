# Placeholder, can be mounted in a container with custom settings

# MKGRAG_EMBEDDING_DIM = 768
