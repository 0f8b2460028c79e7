// styledem headers come before httplib (see service.hpp).
#include "styledem/service.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <thread>

using namespace styledem;
using namespace styledem::service;
using nlohmann::json;

namespace {

NetworkConfig tiny_config() {
    NetworkConfig c;
    c.resolution = 16;
    c.latent_dim = 16;
    c.mapping_layers = 2;
    c.channel_base = 64;
    c.channel_max = 8;
    return c;
}

class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override {
        root_ = fs::temp_directory_path() / ("styledem_service_" + random_id());
        auto b = ModelBundle::create(tiny_config(), 5);
        b.generator_trained = true;
        b.encoder_trained = true;
        save_bundle(b, root_ / "bundles" / "tiny");
        start();
    }

    void TearDown() override {
        stop();
        fs::remove_all(root_);
    }

    void start() {
        ServiceConfig cfg;
        cfg.bundle_dir = root_ / "bundles";
        cfg.session_dir = root_ / "sessions";
        svc_ = std::make_unique<Service>(cfg);
        srv_ = std::make_unique<httplib::Server>();
        svc_->register_routes(*srv_);
        port_ = srv_->bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { srv_->listen_after_bind(); });
        srv_->wait_until_ready();
        cli_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
        cli_->set_read_timeout(120, 0);
    }

    void stop() {
        srv_->stop();
        thread_.join();
        svc_.reset();
    }

    std::pair<int, json> post(const std::string& path, const json& body) {
        auto r = cli_->Post(path, body.dump(), "application/json");
        EXPECT_TRUE(r);
        return {r->status, r->body.empty() ? json() : json::parse(r->body)};
    }

    std::pair<int, json> get(const std::string& path) {
        auto r = cli_->Get(path);
        EXPECT_TRUE(r);
        return {r->status, json::parse(r->body)};
    }

    std::string new_session(const json& body = json::object()) {
        auto [status, j] = post("/sessions", body);
        EXPECT_EQ(status, 201) << j.dump();
        return j["id"];
    }

    json wait_job(const std::string& id) {
        for (int i = 0; i < 600; ++i) {
            auto [status, j] = get("/jobs/" + id);
            if (j["status"] == "succeeded" || j["status"] == "failed" || j["status"] == "cancelled") return j;
            std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
        return json();
    }

    fs::path root_;
    std::unique_ptr<Service> svc_;
    std::unique_ptr<httplib::Server> srv_;
    std::unique_ptr<httplib::Client> cli_;
    std::thread thread_;
    int port_ = 0;
};

}  // namespace

TEST_F(ServiceTest, ListsBundles) {
    auto [status, body] = get("/bundles");
    EXPECT_EQ(status, 200);
    const auto& j = body["bundles"];
    ASSERT_EQ(j.size(), 1u);
    EXPECT_EQ(j[0]["name"], "tiny");
    EXPECT_EQ(j[0]["layers"], 6);
}

TEST_F(ServiceTest, GenerateMixUndoAndPng) {
    const std::string id = new_session({{"min_m", 100}, {"max_m", 600}});
    auto [s0, j0] = post("/sessions/" + id + "/set_latent", {{"latent_ref", "seed:3"}});
    EXPECT_EQ(s0, 200) << j0.dump();
    auto [s1, j1] = post("/sessions/" + id + "/generate", json::object());
    EXPECT_EQ(s1, 200) << j1.dump();
    EXPECT_EQ(j1["width"], 16);

    auto png = cli_->Get("/sessions/" + id + "/terrain.png");
    ASSERT_TRUE(png);
    EXPECT_EQ(png->status, 200);
    EXPECT_EQ(png->get_header_value("Content-Type"), "image/png");
    const auto before = decode_heightfield(png->body, {std::stod(png->get_header_value("X-Min-M")),
                                                       std::stod(png->get_header_value("X-Max-M")),
                                                       std::stod(png->get_header_value("X-Cell-Size-M"))});
    EXPECT_GE(before.min_elevation(), 100.0 - 1e-9);
    EXPECT_LE(before.max_elevation(), 600.0 + 1e-9);

    // Mixing at index 0 takes every row from the other latent.
    auto [s2, j2] = post("/sessions/" + id + "/mix", {{"other_latent_ref", "seed:4"}, {"crossover_index", 0}, {"commit_latent", true}});
    EXPECT_EQ(s2, 200) << j2.dump();
    const std::string other = new_session({{"min_m", 100}, {"max_m", 600}});
    post("/sessions/" + other + "/set_latent", {{"latent_ref", "seed:4"}});
    post("/sessions/" + other + "/generate", json::object());
    EXPECT_EQ(cli_->Get("/sessions/" + id + "/terrain.png")->body, cli_->Get("/sessions/" + other + "/terrain.png")->body);

    auto [s3, j3] = post("/sessions/" + id + "/undo", json::object());
    EXPECT_EQ(s3, 200);
    EXPECT_EQ(cli_->Get("/sessions/" + id + "/terrain.png")->body, png->body);

    auto shade = cli_->Get("/sessions/" + id + "/hillshade.png?azimuth=200&altitude=30");
    ASSERT_TRUE(shade);
    EXPECT_EQ(shade->status, 200);
}

TEST_F(ServiceTest, CrossSessionReferences) {
    const std::string a = new_session({{"width", 4}, {"height", 4}, {"fill_m", 100}});
    const std::string b = new_session({{"width", 4}, {"height", 4}, {"fill_m", 200}});
    json alpha = json::array();
    for (int i = 0; i < 16; ++i) alpha.push_back(i < 8 ? 0.0 : 1.0);
    auto [status, j] = post("/sessions/" + a + "/region_blend", {{"other_terrain_ref", "session:" + b}, {"mask", {{"alpha", alpha}}}});
    EXPECT_EQ(status, 200) << j.dump();
    // Mixing against a session without a latent is a domain error.
    post("/sessions/" + a + "/set_latent", {{"latent_ref", "mean"}});
    auto [s2, j2] = post("/sessions/" + a + "/mix", {{"other_latent_ref", "session:" + b}, {"crossover_index", 1}});
    EXPECT_EQ(s2, 422);
    EXPECT_EQ(j2["field"], "other_latent_ref");
}

TEST_F(ServiceTest, ErrorStatuses) {
    EXPECT_EQ(get("/sessions/00000000deadbeef").first, 404);
    const std::string id = new_session();
    auto r = cli_->Post("/sessions/" + id + "/generate", "{not json", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 400);
    auto [s1, j1] = post("/sessions/" + id + "/generate", json::object());
    EXPECT_EQ(s1, 422);
    EXPECT_EQ(j1["field"], "latent");
    post("/sessions/" + id + "/set_latent", {{"latent_ref", "mean"}});
    auto [s2, j2] = post("/sessions/" + id + "/interpolate", {{"other_latent_ref", "seed:1"}, {"alpha", 1.5}});
    EXPECT_EQ(s2, 422);
    EXPECT_EQ(j2["field"], "alpha");
    auto [s3, j3] = post("/sessions/" + id + "/mix", {{"other_latent_ref", "seed:1"}, {"crossover_index", 99}});
    EXPECT_EQ(s3, 422);
    EXPECT_EQ(j3["field"], "crossover_index");
    EXPECT_EQ(post("/sessions", {{"bundle", "nope"}}).first, 404);
}

TEST_F(ServiceTest, PngUpload) {
    Heightfield h(8, 8, 10.0);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) h.at(x, y) = 50 + x + y;
    auto [png, meta] = encode_heightfield(h);
    httplib::Headers headers{{"X-Min-M", std::to_string(meta.min_m)},
                             {"X-Max-M", std::to_string(meta.max_m)},
                             {"X-Cell-Size-M", "10"}};
    auto r = cli_->Post("/sessions", headers, png, "image/png");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 201) << r->body;
    const auto j = json::parse(r->body);
    EXPECT_EQ(j["width"], 8);
    EXPECT_EQ(j["min_m"], 50.0);
    auto bad = cli_->Post("/sessions", "garbage", "image/png");
    EXPECT_EQ(bad->status, 422);
}

TEST_F(ServiceTest, AmplifyJob) {
    const std::string id = new_session({{"width", 16}, {"height", 16}, {"fill_m", 10}});
    auto [status, j] = post("/sessions/" + id + "/amplify", {{"upscale", 2}});
    ASSERT_EQ(status, 202) << j.dump();
    const auto done = wait_job(j["job_id"]);
    ASSERT_EQ(done["status"], "succeeded") << done.dump();
    EXPECT_EQ(done["result"]["width"], 32);
    EXPECT_EQ(done["result"]["generator_passes"], 9);
    EXPECT_EQ(get("/sessions/" + id).second["width"], 32);
}

TEST_F(ServiceTest, InvertJobAndCancel) {
    const std::string id = new_session({{"width", 16}, {"height", 16}, {"fill_m", 10}});
    auto [status, j] = post("/sessions/" + id + "/invert_opt", {{"steps", 5}});
    ASSERT_EQ(status, 202);
    const auto done = wait_job(j["job_id"]);
    ASSERT_EQ(done["status"], "succeeded") << done.dump();
    EXPECT_EQ(done["result"]["loss_trace"].size(), 6u);
    EXPECT_TRUE(get("/sessions/" + id).second["has_latent"].get<bool>());

    auto [s2, j2] = post("/sessions/" + id + "/invert_opt", {{"steps", 100000}});
    ASSERT_EQ(s2, 202);
    post("/jobs/" + j2["job_id"].get<std::string>() + "/cancel", json::object());
    EXPECT_EQ(wait_job(j2["job_id"])["status"], "cancelled");
    EXPECT_EQ(post("/sessions/" + id + "/invert_opt", {{"use_l2", false}}).first, 422);
}

TEST_F(ServiceTest, SessionsSurviveRestart) {
    const std::string id = new_session({{"width", 4}, {"height", 4}, {"fill_m", 7}});
    post("/sessions/" + id + "/set_latent", {{"latent_ref", "seed:2"}});
    const auto before = cli_->Get("/sessions/" + id + "/latent")->body;
    stop();
    start();
    auto [status, j] = get("/sessions/" + id);
    EXPECT_EQ(status, 200);
    EXPECT_TRUE(j["has_latent"].get<bool>());
    EXPECT_EQ(j["undo_depth"], 1);
    EXPECT_EQ(cli_->Get("/sessions/" + id + "/latent")->body, before);
}

TEST_F(ServiceTest, ConcurrentEditsSerialize) {
    const std::string id = new_session();
    post("/sessions/" + id + "/set_latent", {{"latent_ref", "mean"}});
    std::vector<std::thread> threads;
    std::atomic<int> ok{0};
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&, t] {
            httplib::Client c("127.0.0.1", port_);
            c.set_read_timeout(60, 0);
            for (int k = 0; k < 3; ++k) {
                auto r = c.Post("/sessions/" + id + "/generate", json{{"noise_seed", t * 10 + k}}.dump(), "application/json");
                if (r && r->status == 200) ++ok;
            }
        });
    for (auto& t : threads) t.join();
    EXPECT_EQ(ok, 12);
    EXPECT_EQ(get("/sessions/" + id).second["undo_depth"], 13);
}
