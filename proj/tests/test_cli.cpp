#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "styledem/bundle.hpp"
#include "styledem/heightfield_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace styledem;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(STYLEDEM_CLI_PATH) + " " + args + " 2>/dev/null";
    FILE* p = popen(cmd.c_str(), "r");
    std::string out;
    std::array<char, 4096> buf;
    while (auto n = fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
    const int status = pclose(p);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

Run run_stderr(const std::string& args) {
    const std::string cmd = std::string(STYLEDEM_CLI_PATH) + " " + args + " 2>&1 >/dev/null";
    FILE* p = popen(cmd.c_str(), "r");
    std::string out;
    std::array<char, 4096> buf;
    while (auto n = fread(buf.data(), 1, buf.size(), p)) out.append(buf.data(), n);
    const int status = pclose(p);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "styledem_cli_test";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        NetworkConfig c;
        c.resolution = 16;
        c.latent_dim = 16;
        c.mapping_layers = 2;
        c.channel_base = 64;
        c.channel_max = 8;
        auto b = ModelBundle::create(c, 5);
        b.generator_trained = true;
        b.encoder_trained = true;
        save_bundle(b, dir_ / "bundle");
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }
    static std::string p(const std::string& name) { return (dir_ / name).string(); }
    static fs::path dir_;
};

fs::path CliTest::dir_;

}  // namespace

TEST_F(CliTest, UsageErrorsExitTwo) {
    EXPECT_EQ(run("").code, 2);
    EXPECT_EQ(run("generate").code, 2);
    EXPECT_EQ(run("no-such-command").code, 2);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, GenerateIsDeterministic) {
    auto r1 = run("--seed 7 generate --bundle " + p("bundle") + " --out " + p("g1.png") + " --latent-out " + p("g1.lat"));
    auto r2 = run("--seed 7 generate --bundle " + p("bundle") + " --out " + p("g2.png"));
    ASSERT_EQ(r1.code, 0);
    ASSERT_EQ(r2.code, 0);
    EXPECT_EQ(json::parse(r1.out)["seed"], 7);
    EXPECT_EQ(nn::read_file_bytes(p("g1.png")), nn::read_file_bytes(p("g2.png")));
    EXPECT_TRUE(fs::exists(p("g1.json")));
}

TEST_F(CliTest, MixIndexZeroReturnsDetailSource) {
    ASSERT_EQ(run("--seed 1 generate --bundle " + p("bundle") + " --out " + p("u.png") + " --latent-out " + p("u.lat")).code, 0);
    ASSERT_EQ(run("--seed 2 generate --bundle " + p("bundle") + " --out " + p("v.png") + " --latent-out " + p("v.lat")).code, 0);
    ASSERT_EQ(run("mix --u " + p("u.lat") + " --v " + p("v.lat") + " --index 0 --out " + p("m.lat")).code, 0);
    EXPECT_TRUE(load_latent(p("m.lat")).latent == load_latent(p("v.lat")).latent);
    ASSERT_EQ(run("mix --u " + p("u.lat") + " --v " + p("v.lat") + " --index 6 --out " + p("m6.lat")).code, 0);
    EXPECT_TRUE(load_latent(p("m6.lat")).latent == load_latent(p("u.lat")).latent);
    auto bad = run_stderr("mix --u " + p("u.lat") + " --v " + p("v.lat") + " --index 7 --out " + p("m7.lat"));
    EXPECT_EQ(bad.code, 1);
    EXPECT_EQ(json::parse(bad.out)["field"], "crossover_index");
    ASSERT_EQ(run("interpolate --u " + p("u.lat") + " --v " + p("v.lat") + " --alpha 0.25 --out " + p("i.lat") + " --bundle " +
                  p("bundle") + " --terrain-out " + p("i.png")).code,
              0);
    EXPECT_EQ(run("interpolate --u " + p("u.lat") + " --v " + p("v.lat") + " --alpha 2 --out " + p("i2.lat")).code, 1);
}

TEST_F(CliTest, HydrologyReport) {
    Heightfield t(3, 3, 1.0, 10.0);
    t.at(1, 1) = 8.0;
    save_heightfield(t, p("pit.png"));
    auto r = run("validate hydrology --input " + p("pit.png") + " --breached-out " + p("pit_b.png"));
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_NEAR(j["v_T"].get<double>(), 2.0, 1e-9);
    EXPECT_EQ(j["pit_count_before"], 1);
    fs::create_directories(p("many"));
    save_heightfield(t, p("many/a.png"));
    Heightfield flat(4, 4, 1.0, 3.0);
    save_heightfield(flat, p("many/b.png"));
    auto d = run("validate hydrology --input " + p("many"));
    ASSERT_EQ(d.code, 0);
    const auto dj = json::parse(d.out);
    EXPECT_EQ(dj["count"], 2);
    EXPECT_NEAR(dj["v_T"]["mean"].get<double>(), 1.0, 1e-9);
}

TEST_F(CliTest, AmplifyAndBlend) {
    ASSERT_EQ(run("--seed 3 generate --bundle " + p("bundle") + " --out " + p("t.png")).code, 0);
    auto r = run("amplify --input " + p("t.png") + " --bundle " + p("bundle") + " --upscale 2 --out " + p("t2.png"));
    ASSERT_EQ(r.code, 0);
    const auto j = json::parse(r.out);
    EXPECT_EQ(j["width"], 32);
    EXPECT_EQ(j["generator_passes"], 9);
    EXPECT_EQ(run("amplify --input " + p("t.png") + " --bundle " + p("bundle") + " --upscale 3 --out " + p("t3.png")).code, 1);
    ASSERT_EQ(run("--seed 4 generate --bundle " + p("bundle") + " --out " + p("s.png")).code, 0);
    EXPECT_EQ(run("blend --a " + p("t.png") + " --b " + p("s.png") + " --brush 8 8 --radius 4 --out " + p("bl.png")).code, 0);
}

TEST_F(CliTest, DatasetBuildSynthetic) {
    auto r = run("--seed 5 dataset build --out " + p("ds") + " --synthetic 12 --target-per-class 1 --resolution 16");
    ASSERT_EQ(r.code, 0);
    EXPECT_TRUE(fs::exists(p("ds/manifest.json")));
    EXPECT_GT(json::parse(r.out)["tiles"].get<int>(), 0);
}

TEST_F(CliTest, MissingFileIsOperationError) {
    auto r = run_stderr("encode --bundle " + p("bundle") + " --input " + p("absent.png") + " --out " + p("x.lat"));
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(json::parse(r.out)["type"], "io");
}
