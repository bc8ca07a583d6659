#include "lesionseg/cli.hpp"
#include "lesionseg/trainer.hpp"

int main(int argc, char** argv) {
    lesionseg::train::tune_allocator();
    return lesionseg::cli::run(argc, argv);
}
