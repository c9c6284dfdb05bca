# ivmqr command modules
