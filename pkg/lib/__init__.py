# Lib package

