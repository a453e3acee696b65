# Tables package

