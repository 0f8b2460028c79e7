// Builds a synthetic fBm tile, checks its drainage, and breaches any pits.
#include <iostream>

#include "styledem/styledem.hpp"

int main(int argc, char** argv) {
    using namespace styledem;
    const std::uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 1;
    const Heightfield t = dataset::synthesize_fbm_tile(seed, 64, 6, 0.7);
    std::cout << "elevation " << t.min_elevation() << " .. " << t.max_elevation() << " m\n";
    std::cout << "pits " << hydrology::find_pits(t).size() << "\n";
    const auto b = hydrology::breach(t);
    std::cout << hydrology::to_json(b.report, false).dump(2) << "\n";
    save_heightfield(b.terrain, "breached.png");
}
