// Serves a ToyEncoder over the bridge wire protocol on stdin/stdout.

#include <iostream>

#include <CLI11.hpp>
#include <unistd.h>

#include "oodkit/adversarial.hpp"
#include "oodkit/wire.hpp"

int main(int argc, char** argv) {
    CLI::App app{"toy encoder bridge server"};
    std::size_t height = 8, width = 8, dim = 32;
    std::uint64_t seed = 1;
    app.add_option("--height", height)->capture_default_str();
    app.add_option("--width", width)->capture_default_str();
    app.add_option("--feature-dim", dim)->capture_default_str();
    app.add_option("--seed", seed)->capture_default_str();
    CLI11_PARSE(app, argc, argv);

    try {
        oodkit::ToyEncoder encoder({3, height, width}, dim, seed);
        oodkit::wire::FdStream stream(STDIN_FILENO, STDOUT_FILENO);
        oodkit::wire::serve(stream, encoder);
    } catch (const std::exception& e) {
        std::cerr << "oodkit-toy-bridge: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
