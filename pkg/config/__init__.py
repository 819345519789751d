# Beamsim Configuration Package
