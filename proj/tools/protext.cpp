#include <vector>
#include <string>

#include <protext/protext.hpp>
#include <protext/cli_app.hpp>

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return protext::cli::run_cli(args);
}
