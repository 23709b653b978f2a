#include <cstdio>
#include <exception>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "harness.hpp"

using namespace pdae::acceptance;

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks; one PASS/FAIL line per criterion"};
    std::vector<int> selected;
    std::string cache = "acceptance_cache";
    bool quiet = false;
    app.add_option("--criteria", selected, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
    app.add_option("--cache", cache, "Directory for trained checkpoints and generated data");
    app.add_flag("--quiet", quiet, "Suppress progress output");
    CLI11_PARSE(app, argc, argv);

    torch::set_num_threads(1);
    Options o;
    o.cache = cache;
    o.verbose = !quiet;
    std::filesystem::create_directories(o.cache);

    using Fn = Outcome (*)(const Options&);
    const Fn table[] = {criterion1, criterion2, criterion3, criterion4, criterion5,
                        criterion6, criterion7, criterion8, criterion9};
    std::set<int> run(selected.begin(), selected.end());
    if (run.empty()) {
        for (int i = 1; i <= 9; ++i) {
            run.insert(i);
        }
    }
    int failures = 0;
    for (const int c : run) {
        Stopwatch sw;
        Outcome r;
        try {
            r = table[c - 1](o);
        } catch (const std::exception& e) {
            r = {false, fmt::format("error: {}", e.what())};
        }
        fmt::print("criterion {}: {} ({:.1f} s) {}\n", c, r.pass ? "PASS" : "FAIL", sw.seconds(), r.detail);
        std::fflush(stdout);
        failures += r.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
