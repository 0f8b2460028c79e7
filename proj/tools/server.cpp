#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "styledem/service.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Terrain authoring HTTP service"};
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file");
    CLI11_PARSE(app, argc, argv);
    try {
        std::optional<std::filesystem::path> path;
        if (!config_path.empty()) path = config_path;
        styledem::service::Service svc(styledem::service::load_config(path));
        const auto& c = svc.config();
        std::cerr << "listening on " << c.host << ":" << c.port << ", bundles in " << c.bundle_dir.string() << "\n";
        if (!svc.listen()) {
            std::cerr << "cannot bind " << c.host << ":" << c.port << "\n";
            return 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
