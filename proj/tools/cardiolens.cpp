#include "cardiolens/cli.hpp"

int main(int argc, char** argv) { return cardiolens::cli::run(argc, argv); }
