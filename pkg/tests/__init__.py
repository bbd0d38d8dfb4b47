# Tubule segmentation tests
