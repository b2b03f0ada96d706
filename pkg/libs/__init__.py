# Libs package marker
