#include "mlens/cli.hpp"

int main(int argc, char** argv) { return mlens::dispatch(argc, argv); }
