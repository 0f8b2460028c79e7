#pragma once

// HTTP authoring service: sessions holding a terrain and its latent code,
// toolbox endpoints, async jobs for long operations and a hot-reloading
// registry of model bundles.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "styledem/bundle.hpp"
#include "styledem/error.hpp"
#include "styledem/heightfield.hpp"
#include "styledem/heightfield_io.hpp"
#include "styledem/latent.hpp"
#include "styledem/superres.hpp"
#include "styledem/toolbox.hpp"

// After Eigen: <resolv.h>, pulled in by httplib, defines a macro named _res.
#include <httplib.h>

namespace styledem::service {

using nlohmann::json;
namespace fs = std::filesystem;

// ------------------------------------------------------------------ config

struct ServiceConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    fs::path bundle_dir = "bundles";
    fs::path session_dir = "sessions";
    int undo_depth = 32;
    std::string default_bundle;  // registry key; empty picks the first bundle
};

inline ServiceConfig config_from_json(const json& j) {
    ServiceConfig c;
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.bundle_dir = j.value("bundle_dir", c.bundle_dir.string());
    c.session_dir = j.value("session_dir", c.session_dir.string());
    c.undo_depth = j.value("undo_depth", c.undo_depth);
    c.default_bundle = j.value("default_bundle", c.default_bundle);
    return c;
}

// Reads an optional JSON config file, then applies STYLEDEM_PORT,
// STYLEDEM_BUNDLE_DIR and STYLEDEM_SESSION_DIR.
inline ServiceConfig load_config(const std::optional<fs::path>& path) {
    ServiceConfig c;
    if (path) {
        std::ifstream in(*path);
        if (!in) throw IoError("cannot open config " + path->string());
        try {
            c = config_from_json(json::parse(in));
        } catch (const json::exception& e) {
            throw IoError("bad config " + path->string() + ": " + e.what());
        }
    }
    if (const char* v = std::getenv("STYLEDEM_PORT")) c.port = std::stoi(v);
    if (const char* v = std::getenv("STYLEDEM_BUNDLE_DIR")) c.bundle_dir = v;
    if (const char* v = std::getenv("STYLEDEM_SESSION_DIR")) c.session_dir = v;
    if (c.undo_depth < 1) fail_input("undo_depth", "undo depth must be positive");
    return c;
}

inline std::string random_id() {
    static std::mutex m;
    static std::mt19937_64 rng{std::random_device{}()};
    std::lock_guard lock(m);
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << rng();
    return out.str();
}

// ------------------------------------------------------------------ registry

// Bundles are subdirectories of bundle_dir holding manifest.json, keyed by
// directory name. A changed manifest is reloaded on the next lookup.
class BundleRegistry {
public:
    explicit BundleRegistry(fs::path dir) : dir_(std::move(dir)) {}

    struct Entry {
        std::string key;
        std::shared_ptr<const ModelBundle> bundle;
        fs::file_time_type stamp;
    };

    void refresh() {
        std::lock_guard lock(mutex_);
        std::map<std::string, Entry> next;
        std::error_code ec;
        if (fs::is_directory(dir_, ec)) {
            for (const auto& d : fs::directory_iterator(dir_, ec)) {
                const auto manifest = d.path() / "manifest.json";
                if (!d.is_directory() || !fs::exists(manifest)) continue;
                const std::string key = d.path().filename().string();
                if (key.find(".tmp-") != std::string::npos || key.find(".old-") != std::string::npos) continue;
                const auto stamp = fs::last_write_time(manifest, ec);
                auto it = entries_.find(key);
                if (it != entries_.end() && it->second.stamp == stamp) {
                    next[key] = it->second;
                    continue;
                }
                try {
                    next[key] = Entry{key, std::make_shared<const ModelBundle>(load_bundle(d.path())), stamp};
                } catch (const std::exception&) {
                    // Half-written or corrupt: keep serving the previous copy.
                    if (it != entries_.end()) next[key] = it->second;
                }
            }
        }
        entries_ = std::move(next);
    }

    std::shared_ptr<const ModelBundle> get(const std::string& key) {
        refresh();
        std::lock_guard lock(mutex_);
        if (key.empty()) return entries_.empty() ? nullptr : entries_.begin()->second.bundle;
        auto it = entries_.find(key);
        return it == entries_.end() ? nullptr : it->second.bundle;
    }

    std::string default_key(const std::string& preferred) {
        refresh();
        std::lock_guard lock(mutex_);
        if (!preferred.empty() && entries_.count(preferred)) return preferred;
        return entries_.empty() ? std::string{} : entries_.begin()->first;
    }

    json listing() {
        refresh();
        std::lock_guard lock(mutex_);
        json out = json::array();
        for (const auto& [key, e] : entries_)
            out.push_back({{"name", key},
                           {"version", e.bundle->version},
                           {"resolution", e.bundle->resolution()},
                           {"scale_tag", e.bundle->config.scale_tag},
                           {"layers", e.bundle->layers()},
                           {"latent_dim", e.bundle->dim()},
                           {"generator_trained", e.bundle->generator_trained},
                           {"encoder_trained", e.bundle->encoder_trained}});
        return out;
    }

private:
    fs::path dir_;
    std::mutex mutex_;
    std::map<std::string, Entry> entries_;
};

// ------------------------------------------------------------------ sessions

// FIFO lock: waiters are admitted in the order they arrived.
class TicketLock {
public:
    void lock() {
        std::unique_lock lk(m_);
        const std::uint64_t mine = next_++;
        cv_.wait(lk, [&] { return serving_ == mine; });
    }
    void unlock() {
        std::lock_guard lk(m_);
        ++serving_;
        cv_.notify_all();
    }

private:
    std::mutex m_;
    std::condition_variable cv_;
    std::uint64_t next_ = 0;
    std::uint64_t serving_ = 0;
};

struct Snapshot {
    Heightfield terrain;
    std::optional<LatentWPlus> latent;
};

struct Session {
    std::string id;
    std::string bundle_ref;
    Heightfield terrain;
    std::optional<LatentWPlus> latent;
    double min_m = 0;     // elevation range used when synthesizing
    double max_m = 1000;
    std::deque<Snapshot> undo;
    TicketLock lock;
};

// Copies of other sessions' state referenced by a request, taken before the
// request's own session is locked so cross-session refs cannot deadlock.
struct PeerState {
    std::optional<LatentWPlus> latent;
    Heightfield terrain;
};
using Peers = std::map<std::string, PeerState>;

class HttpError : public std::runtime_error {
public:
    HttpError(int status, std::string field, const std::string& what)
        : std::runtime_error(what), status(status), field(std::move(field)) {}
    int status;
    std::string field;
};

namespace detail {

inline void write_doubles(const fs::path& p, const std::vector<double>& v) {
    nn::write_file_bytes(p, std::string(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(const fs::path& p) {
    const std::string bytes = nn::read_file_bytes(p);
    std::vector<double> v(bytes.size() / sizeof(double));
    std::memcpy(v.data(), bytes.data(), v.size() * sizeof(double));
    return v;
}

inline json terrain_meta(const Heightfield& h) {
    return {{"width", h.width()}, {"height", h.height()}, {"cell_size_m", h.cell_size}};
}

inline Heightfield terrain_from(const json& meta, const fs::path& bin) {
    return Heightfield(meta.at("width").get<int>(), meta.at("height").get<int>(), meta.at("cell_size_m").get<double>(),
                       read_doubles(bin));
}

}  // namespace detail

// Sessions on disk: <session_dir>/<id>/session.json plus raw float64
// terrains and latent files, rewritten atomically after every mutation.
inline void persist_session(const Session& s, const fs::path& root) {
    fs::create_directories(root);
    const fs::path dir = root / s.id;
    const fs::path tmp = root / (s.id + ".tmp-" + random_id());
    fs::create_directories(tmp);
    json j = {{"id", s.id},
              {"bundle", s.bundle_ref},
              {"min_m", s.min_m},
              {"max_m", s.max_m},
              {"terrain", detail::terrain_meta(s.terrain)},
              {"has_latent", s.latent.has_value()}};
    detail::write_doubles(tmp / "terrain.bin", s.terrain.grid.values);
    if (s.latent) save_latent(*s.latent, "", tmp / "latent.lat");
    json undo = json::array();
    for (std::size_t k = 0; k < s.undo.size(); ++k) {
        const auto& snap = s.undo[k];
        detail::write_doubles(tmp / ("undo" + std::to_string(k) + ".bin"), snap.terrain.grid.values);
        if (snap.latent) save_latent(*snap.latent, "", tmp / ("undo" + std::to_string(k) + ".lat"));
        undo.push_back({{"terrain", detail::terrain_meta(snap.terrain)}, {"has_latent", snap.latent.has_value()}});
    }
    j["undo"] = undo;
    nn::write_file_bytes(tmp / "session.json", j.dump(2));
    const fs::path old = root / (s.id + ".old-" + random_id());
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(tmp, dir);
    fs::remove_all(old);
}

inline std::unique_ptr<Session> load_session(const fs::path& dir) {
    const json j = json::parse(nn::read_file_bytes(dir / "session.json"));
    auto s = std::make_unique<Session>();
    s->id = j.at("id").get<std::string>();
    s->bundle_ref = j.value("bundle", std::string{});
    s->min_m = j.value("min_m", 0.0);
    s->max_m = j.value("max_m", 1000.0);
    s->terrain = detail::terrain_from(j.at("terrain"), dir / "terrain.bin");
    if (j.value("has_latent", false)) s->latent = load_latent(dir / "latent.lat").latent;
    const auto& undo = j.at("undo");
    for (std::size_t k = 0; k < undo.size(); ++k) {
        Snapshot snap{detail::terrain_from(undo[k].at("terrain"), dir / ("undo" + std::to_string(k) + ".bin")), std::nullopt};
        if (undo[k].value("has_latent", false)) snap.latent = load_latent(dir / ("undo" + std::to_string(k) + ".lat")).latent;
        s->undo.push_back(std::move(snap));
    }
    return s;
}

// ------------------------------------------------------------------ jobs

struct Job {
    std::string id;
    std::string kind;
    std::string session_id;
    std::atomic<bool> cancel{false};
    std::mutex m;
    std::string status = "queued";  // queued | running | succeeded | failed | cancelled
    double progress = 0;
    std::string stage;
    json error;
    json result;
    std::thread worker;

    json to_json() {
        std::lock_guard lock(m);
        json j = {{"id", id}, {"kind", kind}, {"session", session_id}, {"status", status}, {"progress", progress}, {"stage", stage}};
        if (!error.is_null()) j["error"] = error;
        if (!result.is_null()) j["result"] = result;
        return j;
    }
    void update(double p, const std::string& st) {
        std::lock_guard lock(m);
        progress = p;
        stage = st;
    }
};

// ------------------------------------------------------------------ service

class Service {
public:
    explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)), registry_(cfg_.bundle_dir) {
        fs::create_directories(cfg_.session_dir);
        for (const auto& d : fs::directory_iterator(cfg_.session_dir)) {
            const std::string name = d.path().filename().string();
            if (!d.is_directory() || name.find('.') != std::string::npos) continue;
            try {
                auto s = load_session(d.path());
                sessions_[s->id] = std::move(s);
            } catch (const std::exception&) {
            }
        }
    }

    ~Service() {
        std::vector<std::shared_ptr<Job>> jobs;
        {
            std::lock_guard lock(jobs_mutex_);
            for (auto& [_, j] : jobs_) jobs.push_back(j);
        }
        for (auto& j : jobs) {
            j->cancel = true;
            if (j->worker.joinable()) j->worker.join();
        }
    }

    const ServiceConfig& config() const { return cfg_; }
    BundleRegistry& registry() { return registry_; }

    void register_routes(httplib::Server& srv) {
        srv.Get("/bundles", [this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, {{"bundles", registry_.listing()}});
        });
        srv.Post("/sessions", wrap([this](const httplib::Request& req, httplib::Response& res) { create_session(req, res); }));
        srv.Get(R"(/sessions/([0-9a-f]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
            with_session(req, [&](Session& s) { reply(res, 200, describe(s)); });
        }));
        srv.Get(R"(/sessions/([0-9a-f]+)/terrain\.png)", wrap([this](const httplib::Request& req, httplib::Response& res) {
            with_session(req, [&](Session& s) {
                auto [png, meta] = encode_heightfield(s.terrain);
                res.set_header("X-Min-M", json(meta.min_m).dump());
                res.set_header("X-Max-M", json(meta.max_m).dump());
                res.set_header("X-Cell-Size-M", json(meta.cell_size_m).dump());
                res.set_header("X-Sidecar", sidecar_json(meta).dump());
                res.set_content(png, "image/png");
            });
        }));
        srv.Get(R"(/sessions/([0-9a-f]+)/hillshade\.png)", wrap([this](const httplib::Request& req, httplib::Response& res) {
            const double az = req.has_param("azimuth") ? std::stod(req.get_param_value("azimuth")) : 315.0;
            const double alt = req.has_param("altitude") ? std::stod(req.get_param_value("altitude")) : 45.0;
            with_session(req, [&](Session& s) {
                const auto shade = hillshade(s.terrain, az, alt);
                std::vector<std::uint16_t> px(shade.size());
                for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint16_t>(std::lround(shade.values[i] * 255.0));
                res.set_content(encode_png_gray(shade.width, shade.height, px, 8), "image/png");
            });
        }));
        srv.Get(R"(/sessions/([0-9a-f]+)/latent)", wrap([this](const httplib::Request& req, httplib::Response& res) {
            with_session(req, [&](Session& s) {
                if (!s.latent) throw HttpError(422, "latent", "session has no latent");
                res.set_content(encode_latent(*s.latent, bundle_for(s)->version), "application/octet-stream");
            });
        }));
        post_session(srv, "encode", [this](Session& s, const json&, const Peers&) {
            auto b = bundle_for(s);
            if (!b->encoder_trained) throw HttpError(422, "bundle", "bundle has no trained encoder");
            const int R = b->resolution();
            const Heightfield sized = (s.terrain.width() == R && s.terrain.height() == R) ? s.terrain : resample(s.terrain, R, R);
            push_undo(s);
            s.latent = encode(normalize(sized), *b);
            return json{{"layers", s.latent->layers()}, {"dim", s.latent->dim()}};
        });
        post_session(srv, "generate", [this](Session& s, const json& body, const Peers&) {
            auto b = bundle_for(s);
            if (!s.latent) throw HttpError(422, "latent", "session has no latent; encode or set one first");
            apply_range(s, body);
            const auto seed = body.value("noise_seed", kDefaultNoiseSeed);
            push_undo(s);
            s.terrain = to_terrain(synthesize(*s.latent, *b, seed), s, *b);
            return json{{"width", s.terrain.width()}, {"height", s.terrain.height()}};
        });
        post_session(srv, "set_latent", [this](Session& s, const json& body, const Peers& peers) {
            auto b = bundle_for(s);
            LatentWPlus w = resolve_latent(require<std::string>(body, "latent_ref"), s, *b, peers);
            push_undo(s);
            s.latent = std::move(w);
            return json{{"layers", s.latent->layers()}};
        });
        post_session(srv, "mix", [this](Session& s, const json& body, const Peers& peers) {
            auto b = bundle_for(s);
            if (!s.latent) throw HttpError(422, "latent", "session has no latent");
            const LatentWPlus v = resolve_latent(require<std::string>(body, "other_latent_ref"), s, *b, peers);
            const LatentWPlus mixed = toolbox::style_mix(*s.latent, v, require<int>(body, "crossover_index"));
            apply_range(s, body);
            const auto seed = body.value("noise_seed", kDefaultNoiseSeed);
            push_undo(s);
            s.terrain = to_terrain(synthesize(mixed, *b, seed), s, *b);
            if (body.value("commit_latent", false)) s.latent = mixed;
            return json{{"width", s.terrain.width()}, {"height", s.terrain.height()}};
        });
        post_session(srv, "interpolate", [this](Session& s, const json& body, const Peers& peers) {
            auto b = bundle_for(s);
            if (!s.latent) throw HttpError(422, "latent", "session has no latent");
            const LatentWPlus v = resolve_latent(require<std::string>(body, "other_latent_ref"), s, *b, peers);
            const LatentWPlus w = toolbox::interpolate(*s.latent, v, require<double>(body, "alpha"), body.value("extrapolate", false));
            apply_range(s, body);
            const auto seed = body.value("noise_seed", kDefaultNoiseSeed);
            push_undo(s);
            s.terrain = to_terrain(synthesize(w, *b, seed), s, *b);
            if (body.value("commit_latent", false)) s.latent = w;
            return json{{"width", s.terrain.width()}, {"height", s.terrain.height()}};
        });
        post_session(srv, "region_blend", [this](Session& s, const json& body, const Peers& peers) {
            const Heightfield other = resolve_terrain(require<std::string>(body, "other_terrain_ref"), s, peers);
            const RegionMask mask = parse_mask(body.at("mask"), s.terrain.width(), s.terrain.height());
            Heightfield out = toolbox::region_blend(s.terrain, other, mask);
            push_undo(s);
            s.terrain = std::move(out);
            return json{{"width", s.terrain.width()}, {"height", s.terrain.height()}};
        });
        post_session(srv, "undo", [this](Session& s, const json&, const Peers&) {
            if (s.undo.empty()) throw HttpError(422, "undo", "nothing to undo");
            s.terrain = std::move(s.undo.back().terrain);
            s.latent = std::move(s.undo.back().latent);
            s.undo.pop_back();
            return json{{"undo_depth", s.undo.size()}};
        });
        srv.Post(R"(/sessions/([0-9a-f]+)/amplify)", wrap([this](const httplib::Request& req, httplib::Response& res) {
            start_amplify(req, res);
        }));
        srv.Post(R"(/sessions/([0-9a-f]+)/invert_opt)", wrap([this](const httplib::Request& req, httplib::Response& res) {
            start_invert(req, res);
        }));
        srv.Get(R"(/jobs/([0-9a-f]+))", wrap([this](const httplib::Request& req, httplib::Response& res) {
            reply(res, 200, find_job(req.matches[1])->to_json());
        }));
        srv.Post(R"(/jobs/([0-9a-f]+)/cancel)", wrap([this](const httplib::Request& req, httplib::Response& res) {
            auto j = find_job(req.matches[1]);
            j->cancel = true;
            reply(res, 200, j->to_json());
        }));
    }

private:
    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    static void reply(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static Handler wrap(Handler h) {
        return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                h(req, res);
            } catch (const HttpError& e) {
                reply(res, e.status, {{"error", e.what()}, {"field", e.field}});
            } catch (const InvalidInput& e) {
                reply(res, 422, {{"error", e.what()}, {"field", e.field()}});
            } catch (const json::exception& e) {
                reply(res, 422, {{"error", std::string("bad request body: ") + e.what()}, {"field", "body"}});
            } catch (const std::exception& e) {
                reply(res, 500, {{"error", e.what()}});
            }
        };
    }

    template <class T>
    static T require(const json& body, const std::string& field) {
        if (!body.contains(field)) throw HttpError(422, field, "missing field " + field);
        try {
            return body.at(field).get<T>();
        } catch (const json::exception&) {
            throw HttpError(422, field, "field " + field + " has the wrong type");
        }
    }

    static json parse_body(const httplib::Request& req) {
        if (req.body.empty()) return json::object();
        try {
            return json::parse(req.body);
        } catch (const json::exception& e) {
            throw HttpError(400, "body", std::string("malformed JSON: ") + e.what());
        }
    }

    Session& session(const std::string& id) {
        std::lock_guard lock(sessions_mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) throw HttpError(404, "id", "unknown session " + id);
        return *it->second;
    }

    template <class F>
    void with_session(const httplib::Request& req, F&& f) {
        Session& s = session(req.matches[1]);
        std::lock_guard lock(s.lock);
        f(s);
    }

    void post_session(httplib::Server& srv, const std::string& name, std::function<json(Session&, const json&, const Peers&)> op) {
        srv.Post(R"(/sessions/([0-9a-f]+)/)" + name, wrap([this, op = std::move(op)](const httplib::Request& req, httplib::Response& res) {
            const json body = parse_body(req);
            const std::string self = req.matches[1];
            Peers peers;
            for (const auto& [key, value] : body.items()) {
                if (!value.is_string()) continue;
                const std::string ref = value.get<std::string>();
                if (ref.rfind("session:", 0) != 0 || ref.substr(8) == self) continue;
                Session& other = session(ref.substr(8));
                std::lock_guard lock(other.lock);
                peers[other.id] = PeerState{other.latent, other.terrain};
            }
            with_session(req, [&](Session& s) {
                json out = op(s, body, peers);
                persist_session(s, cfg_.session_dir);
                out["id"] = s.id;
                out["undo_depth"] = s.undo.size();
                reply(res, 200, out);
            });
        }));
    }

public:
    // Serves until the process stops. Returns false if the port cannot be bound.
    bool listen() {
        httplib::Server srv;
        register_routes(srv);
        return srv.listen(cfg_.host, cfg_.port);
    }

private:
    json describe(const Session& s) {
        return {{"id", s.id},
                {"bundle", s.bundle_ref},
                {"width", s.terrain.width()},
                {"height", s.terrain.height()},
                {"cell_size_m", s.terrain.cell_size},
                {"min_m", s.min_m},
                {"max_m", s.max_m},
                {"has_latent", s.latent.has_value()},
                {"undo_depth", s.undo.size()}};
    }

    std::shared_ptr<const ModelBundle> bundle_named(const std::string& key) {
        auto b = registry_.get(key);
        if (!b) throw HttpError(404, "bundle", key.empty() ? "no bundles registered" : "unknown bundle " + key);
        return b;
    }

    std::shared_ptr<const ModelBundle> bundle_for(const Session& s) { return bundle_named(s.bundle_ref); }

    void push_undo(Session& s) {
        s.undo.push_back({s.terrain, s.latent});
        while (static_cast<int>(s.undo.size()) > cfg_.undo_depth) s.undo.pop_front();
    }

    static void apply_range(Session& s, const json& body) {
        const double lo = body.value("min_m", s.min_m), hi = body.value("max_m", s.max_m);
        if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) throw HttpError(422, "min_m", "min_m must not exceed max_m");
        s.min_m = lo;
        s.max_m = hi;
    }

    static Heightfield to_terrain(NormalizedField n, const Session& s, const ModelBundle& b) {
        n.min_m = s.min_m;
        n.max_m = s.max_m;
        return denormalize(n, b.config.cell_size_m());
    }

    // "session:<id>" is another session's latent, "seed:<n>" the broadcast
    // mapping of z drawn from n, "mean" the average w.
    LatentWPlus resolve_latent(const std::string& ref, const Session& self, const ModelBundle& b, const Peers& peers) {
        if (ref == "mean") return mean_latent(b);
        if (ref.rfind("seed:", 0) == 0) {
            std::uint64_t seed;
            try {
                seed = std::stoull(ref.substr(5));
            } catch (const std::exception&) {
                throw HttpError(422, "other_latent_ref", "bad seed in " + ref);
            }
            return broadcast(map_latent(sample_z(seed, b.dim()), b), b);
        }
        if (ref.rfind("session:", 0) == 0) {
            const std::string id = ref.substr(8);
            if (id == self.id) {
                if (!self.latent) throw HttpError(422, "other_latent_ref", "session has no latent");
                return *self.latent;
            }
            auto it = peers.find(id);
            if (it == peers.end()) throw HttpError(404, "other_latent_ref", "unknown session " + id);
            const auto& other = it->second;
            if (!other.latent) throw HttpError(422, "other_latent_ref", "session " + id + " has no latent");
            if (other.latent->layers() != b.layers() || other.latent->dim() != b.dim())
                throw HttpError(422, "other_latent_ref", "latent dimensions differ from this session's bundle");
            return *other.latent;
        }
        throw HttpError(422, "other_latent_ref", "latent refs are session:<id>, seed:<n> or mean");
    }

    Heightfield resolve_terrain(const std::string& ref, const Session& self, const Peers& peers) {
        if (ref.rfind("seed:", 0) == 0) {
            auto b = bundle_for(self);
            const auto w = broadcast(map_latent(sample_z(std::stoull(ref.substr(5)), b->dim()), *b), *b);
            return to_terrain(synthesize(w, *b), self, *b);
        }
        if (ref.rfind("session:", 0) == 0) {
            const std::string id = ref.substr(8);
            if (id == self.id) return self.terrain;
            auto it = peers.find(id);
            if (it == peers.end()) throw HttpError(404, "other_terrain_ref", "unknown session " + id);
            return it->second.terrain;
        }
        throw HttpError(422, "other_terrain_ref", "terrain refs are session:<id> or seed:<n>");
    }

    static RegionMask parse_mask(const json& m, int w, int h) {
        if (m.contains("alpha")) {
            auto a = m.at("alpha").get<std::vector<double>>();
            if (a.size() != static_cast<std::size_t>(w) * h)
                throw HttpError(422, "mask", "mask has " + std::to_string(a.size()) + " values, terrain has " + std::to_string(w * h));
            RegionMask mask{Grid<double>(w, h, std::move(a))};
            return mask;
        }
        if (m.contains("brush")) {
            const auto& b = m.at("brush");
            std::vector<toolbox::BrushDab> dabs;
            for (const auto& d : b.at("dabs")) dabs.push_back({d.at(0).get<double>(), d.at(1).get<double>()});
            return toolbox::brush_mask(w, h, dabs, b.value("radius", 8.0), b.value("feather", 0.5));
        }
        throw HttpError(422, "mask", "mask needs alpha or brush");
    }

    void create_session(const httplib::Request& req, httplib::Response& res) {
        auto s = std::make_unique<Session>();
        s->id = random_id();
        json body = json::object();
        const bool is_png = req.get_header_value("Content-Type") == "image/png";
        if (!is_png) body = parse_body(req);
        s->bundle_ref = registry_.default_key(body.value("bundle", cfg_.default_bundle));
        if (body.contains("bundle") && !registry_.get(body["bundle"].get<std::string>()))
            throw HttpError(404, "bundle", "unknown bundle " + body["bundle"].get<std::string>());
        auto b = registry_.get(s->bundle_ref);
        if (is_png) {
            Sidecar meta;
            if (req.has_header("X-Min-M")) meta.min_m = std::stod(req.get_header_value("X-Min-M"));
            if (req.has_header("X-Max-M")) meta.max_m = std::stod(req.get_header_value("X-Max-M"));
            if (req.has_header("X-Cell-Size-M")) meta.cell_size_m = std::stod(req.get_header_value("X-Cell-Size-M"));
            try {
                s->terrain = decode_heightfield(req.body, meta);
            } catch (const IoError& e) {
                throw HttpError(422, "terrain", e.what());
            }
        } else {
            const int R = b ? b->resolution() : 64;
            const int w = body.value("width", R), h = body.value("height", R);
            const double cell = body.value("cell_size_m", b ? b->config.cell_size_m() : 30.0);
            if (w < 1 || h < 1 || w > 8192 || h > 8192) throw HttpError(422, "width", "terrain size out of range");
            s->terrain = Heightfield(w, h, cell, body.value("fill_m", 0.0));
            if (body.contains("elevations")) s->terrain.grid = Grid<double>(w, h, body["elevations"].get<std::vector<double>>());
        }
        s->terrain.validate();
        const double lo = s->terrain.min_elevation(), hi = s->terrain.max_elevation();
        if (hi > lo) {
            s->min_m = lo;
            s->max_m = hi;
        }
        apply_range(*s, body);
        persist_session(*s, cfg_.session_dir);
        json out = describe(*s);
        std::lock_guard lock(sessions_mutex_);
        sessions_[s->id] = std::move(s);
        reply(res, 201, out);
    }

    std::shared_ptr<Job> find_job(const std::string& id) {
        std::lock_guard lock(jobs_mutex_);
        auto it = jobs_.find(id);
        if (it == jobs_.end()) throw HttpError(404, "id", "unknown job " + id);
        return it->second;
    }

    std::shared_ptr<Job> new_job(const std::string& kind, const std::string& session_id) {
        auto j = std::make_shared<Job>();
        j->id = random_id();
        j->kind = kind;
        j->session_id = session_id;
        std::lock_guard lock(jobs_mutex_);
        jobs_[j->id] = j;
        return j;
    }

    template <class Work>
    void launch(const std::shared_ptr<Job>& job, Work work) {
        job->worker = std::thread([this, job, work = std::move(work)]() mutable {
            {
                std::lock_guard lock(job->m);
                job->status = "running";
            }
            try {
                json result = work(*job);
                std::lock_guard lock(job->m);
                job->status = job->cancel ? "cancelled" : "succeeded";
                job->progress = 1.0;
                job->result = std::move(result);
            } catch (const superres::PatchError& e) {
                std::lock_guard lock(job->m);
                job->status = job->cancel ? "cancelled" : "failed";
                job->error = {{"message", e.what()},
                              {"stage", e.stage()},
                              {"patch", {{"layer", superres::layer_name(e.patch().layer)}, {"a", e.patch().a}, {"b", e.patch().b},
                                         {"x", e.patch().x}, {"y", e.patch().y}}}};
            } catch (const std::exception& e) {
                std::lock_guard lock(job->m);
                job->status = job->cancel ? "cancelled" : "failed";
                job->error = {{"message", e.what()}, {"stage", job->stage}};
            }
        });
    }

    void start_amplify(const httplib::Request& req, httplib::Response& res) {
        const json body = parse_body(req);
        Session& s = session(req.matches[1]);
        const int upscale = body.value("upscale", 4);
        std::string bundle_key;
        Heightfield terrain;
        {
            std::lock_guard lock(s.lock);
            bundle_key = body.value("bundle", s.bundle_ref);
            terrain = s.terrain;
        }
        auto b = bundle_named(bundle_key);
        if (!b->encoder_trained) throw HttpError(422, "bundle", "amplify needs a trained encoder");
        if (upscale < 1 || b->resolution() % upscale != 0)
            throw HttpError(422, "upscale", "upscale must divide the bundle resolution " + std::to_string(b->resolution()));
        auto job = new_job("amplify", s.id);
        launch(job, [this, b, terrain, upscale, &s](Job& j) {
            superres::AmplifyOptions opt;
            opt.cancel = &j.cancel;
            opt.progress = [&j](double f, const std::string& st) { j.update(f, st); };
            auto r = superres::amplify(terrain, *b, upscale, opt);
            std::lock_guard lock(s.lock);
            push_undo(s);
            s.terrain = std::move(r.terrain);
            s.latent.reset();
            persist_session(s, cfg_.session_dir);
            return json{{"width", s.terrain.width()}, {"height", s.terrain.height()}, {"cell_size_m", s.terrain.cell_size},
                        {"generator_passes", r.generator_passes}, {"encoder_passes", r.encoder_passes}};
        });
        reply(res, 202, {{"job_id", job->id}});
    }

    void start_invert(const httplib::Request& req, httplib::Response& res) {
        const json body = parse_body(req);
        Session& s = session(req.matches[1]);
        toolbox::InvertConfig cfg;
        cfg.steps = body.value("steps", 100);
        cfg.lr = body.value("lr", cfg.lr);
        cfg.use_l2 = body.value("use_l2", true);
        cfg.use_perceptual = body.value("use_perceptual", false);
        if (!cfg.use_l2 && !cfg.use_perceptual) throw HttpError(422, "use_l2", "at least one loss must be enabled");
        Heightfield terrain;
        std::shared_ptr<const ModelBundle> b;
        {
            std::lock_guard lock(s.lock);
            terrain = s.terrain;
            b = bundle_for(s);
            if (s.latent && body.value("init_from_latent", false)) cfg.init = s.latent;
        }
        auto job = new_job("invert_opt", s.id);
        launch(job, [this, b, terrain, cfg, &s](Job& j) mutable {
            // Optimization toggles gradient flags, so it runs on private weights.
            const ModelBundle local = deep_copy(*b);
            cfg.cancel = &j.cancel;
            const int steps = cfg.steps;
            cfg.progress = [&j, steps](int step, double) { j.update(steps ? static_cast<double>(step) / steps : 1.0, "optimize"); };
            const int R = local.resolution();
            const Heightfield sized = (terrain.width() == R && terrain.height() == R) ? terrain : resample(terrain, R, R);
            const auto r = toolbox::optimize_invert(normalize(sized), local, cfg);
            std::lock_guard lock(s.lock);
            push_undo(s);
            s.latent = r.latent;
            s.terrain = to_terrain(synthesize(r.latent, local), s, local);
            persist_session(s, cfg_.session_dir);
            return json{{"best_loss", r.best_loss}, {"best_step", r.best_step}, {"loss_trace", r.loss_trace}};
        });
        reply(res, 202, {{"job_id", job->id}});
    }

    ServiceConfig cfg_;
    BundleRegistry registry_;
    std::mutex sessions_mutex_;
    std::map<std::string, std::unique_ptr<Session>> sessions_;
    std::mutex jobs_mutex_;
    std::map<std::string, std::shared_ptr<Job>> jobs_;
};

}  // namespace styledem::service
