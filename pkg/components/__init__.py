# Components package

