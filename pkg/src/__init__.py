# DoseDiff - Source Package
