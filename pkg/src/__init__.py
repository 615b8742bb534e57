"""
pfista-parallel - pFISTA reconstructions for SENSE and SPIRiT parallel MRI
"""
