#include "commands.hpp"

int main(int argc, char** argv) { return kcal::cli::run(argc, argv); }
