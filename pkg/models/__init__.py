# Beamsim Models Package
