# Beamsim Services Package
