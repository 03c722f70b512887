// SPDX-License-Identifier: Apache-2.0
#include "vaguide/service.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <mutex>
#include <thread>
#include <vector>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "vaguide/error.hpp"
#include "vaguide/rng.hpp"

namespace vaguide {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = boost::asio::ip::tcp;

SequenceSample history_sample(const std::deque<HistoryEntry> &history, int L, std::uint64_t rng_seed) {
  if (history.empty()) fail(ErrorCode::invalid_argument, "history_sample: empty history");
  const int q = static_cast<int>(history.size()) - 1;
  bool fallback = false;
  const auto idx = segmental_indices(q, L, rng_seed, true, &fallback);
  SequenceSample s;
  s.query_index = q;
  s.fallback = fallback;
  for (int i : idx) s.images.push_back(history[i].image);
  for (std::size_t i = 0; i + 1 < idx.size(); ++i)
    s.actions.push_back(relative_action(history[idx[i]].pose, history[idx[i + 1]].pose));
  s.frame_indices = idx;
  return s;
}

// ---- session ------------------------------------------------------------------

Pose Session::start_pose(const Phantom &ph) {
  // A fixed offset from the first standard plane, so a fresh session starts
  // with something to correct.
  const Action6 offset{{18.0, -12.0, 9.0}, {14.0, -9.0, 6.0}};
  return apply_action(standard_planes(ph)[0].pose, offset);
}

Session::Session(std::string id, ModelSnapshot model, SessionConfig cfg, Clock clock)
    : id_(std::move(id)), model_(std::move(model)), cfg_(cfg), clock_(std::move(clock)) {
  if (!model_) fail(ErrorCode::invalid_argument, "session needs a model");
  if (cfg_.image_size != model_->config().backbone.image_size)
    fail(ErrorCode::invalid_argument, "session image size does not match the model");
  cfg_.history_capacity = std::max<std::size_t>(cfg_.history_capacity, static_cast<std::size_t>(model_->config().adapter.L));
  if (!clock_) {
    const auto t0 = std::chrono::steady_clock::now();
    clock_ = [t0] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  }
  phantom_ = make_phantom(cfg_.phantom_seed);
  planes_ = standard_planes(phantom_);
  pose_ = start_pose(phantom_);
}

namespace {

Pose clamp_to(const Box &b, const Pose &p) {
  Vec3 pos = p.position();
  for (int i = 0; i < 3; ++i) pos[i] = std::clamp(pos[i], b.lo[i], b.hi[i]);
  return Pose(pos, p.orientation());
}

bool finite(const Action6 &a) {
  for (std::size_t i = 0; i < 6; ++i)
    if (!std::isfinite(a[i])) return false;
  return true;
}

}  // namespace

GuidancePayload Session::observe(const ModelSnapshot &snapshot) {
  const ModelSnapshot &model = snapshot ? snapshot : model_;
  const double t = clock_();
  HistoryEntry e;
  e.pose = pose_;
  e.timestamp_s = t;
  RenderOptions ro;
  ro.fov_mm = cfg_.fov_mm;
  e.image = render_slice(phantom_, pose_, phase_at(t, cfg_.heart_rate_hz), cfg_.image_size, cfg_.image_size,
                         derive_seed(cfg_.seed, static_cast<std::uint64_t>(renders_++)), ro);
  if (!history_.empty() && e.timestamp_s < history_.back().timestamp_s) e.timestamp_s = history_.back().timestamp_s;
  history_.push_back(std::move(e));
  while (history_.size() > cfg_.history_capacity) history_.pop_front();

  const auto sample = history_sample(history_, model->config().adapter.L,
                                     derive_seed(cfg_.seed, 0x51000000ULL + static_cast<std::uint64_t>(seq_)));
  GuidancePayload p;
  p.seq = ++seq_;
  p.image = history_.back().image;
  p.pose = pose_;
  p.guidance = model->predict(sample);
  for (int i = 0; i < kNumPlanes; ++i) p.plane_dist[i] = pose_distance(pose_, planes_[i].pose);
  p.selected = selected_;
  p.history_length = history_.size();
  p.fallback = sample.fallback;
  p.sample_indices = sample.frame_indices;
  return p;
}

GuidancePayload Session::step(const Action6 &delta, const ModelSnapshot &model) {
  if (!finite(delta)) fail(ErrorCode::invalid_argument, "move delta must be finite");
  pose_ = clamp_to(phantom_.bounds, apply_action(pose_, delta));
  return observe(model);
}

GuidancePayload Session::place(const Pose &pose, const ModelSnapshot &model) {
  pose_ = clamp_to(phantom_.bounds, pose);
  return observe(model);
}

void Session::select_plane(int plane_id) {
  if (plane_id < 1 || plane_id > kNumPlanes)
    fail(ErrorCode::invalid_argument, "plane must be in 1.." + std::to_string(kNumPlanes));
  selected_ = plane_id;
}

GuidancePayload Session::reset(const ModelSnapshot &model) {
  history_.clear();
  pose_ = start_pose(phantom_);
  return observe(model);
}

// ---- wire format ---------------------------------------------------------------

std::string encode_image_b64(const SliceImage &img) {
  static_assert(sizeof(float) == 4);
  std::vector<unsigned char> raw(img.data.size() * 4);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &img.data[i], 4);
    for (int b = 0; b < 4; ++b) raw[i * 4 + b] = static_cast<unsigned char>(u >> (8 * b));
  }
  std::string out(beast::detail::base64::encoded_size(raw.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), raw.data(), raw.size()));
  return out;
}

SliceImage decode_image_b64(int width, int height, const std::string &b64) {
  std::vector<unsigned char> raw(beast::detail::base64::decoded_size(b64.size()));
  const auto [written, read] = beast::detail::base64::decode(raw.data(), b64.data(), b64.size());
  (void)read;
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (written != n * 4) fail(ErrorCode::format, "image payload has the wrong length");
  SliceImage img{width, height, std::vector<float>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(raw[i * 4 + b]) << (8 * b);
    std::memcpy(&img.data[i], &u, 4);
  }
  return img;
}

nlohmann::json payload_json(const GuidancePayload &p) {
  nlohmann::json guidance = nlohmann::json::array();
  nlohmann::json dist = nlohmann::json::array();
  for (int i = 0; i < kNumPlanes; ++i) {
    const auto a = p.guidance[i].to_array();
    guidance.push_back(std::vector<double>(a.begin(), a.end()));
    dist.push_back({p.plane_dist[i].trans_mm, p.plane_dist[i].rot_deg});
  }
  const auto pose = p.pose.to_array();
  return {{"type", "state"},
          {"seq", p.seq},
          {"pose", std::vector<double>(pose.begin(), pose.end())},
          {"image", {{"w", p.image.width}, {"h", p.image.height}, {"b64", encode_image_b64(p.image)}}},
          {"guidance", guidance},
          {"selected", p.selected},
          {"history", p.history_length},
          {"fallback", p.fallback},
          {"debug", {{"plane_dist", dist}}}};
}

nlohmann::json error_frame(long seq, const std::string &code, const std::string &msg) {
  return {{"type", "error"}, {"seq", seq}, {"code", code}, {"msg", msg}};
}

nlohmann::json planes_json() {
  nlohmann::json a = nlohmann::json::array();
  for (int i = 0; i < kNumPlanes; ++i) a.push_back({{"id", i + 1}, {"name", std::string(kPlaneNames[i])}});
  return a;
}

nlohmann::json handle_message(Session &session, const std::string &text, const ModelSnapshot &model) {
  nlohmann::json msg;
  try {
    msg = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception &e) {
    return error_frame(-1, "parse", e.what());
  }
  const long seq = msg.is_object() && msg.contains("seq") && msg["seq"].is_number_integer() ? msg["seq"].get<long>() : -1;
  try {
    if (!msg.is_object() || !msg.contains("type") || !msg["type"].is_string())
      return error_frame(seq, "protocol", "message needs a string 'type'");
    const std::string type = msg["type"].get<std::string>();
    if (type == "move") {
      if (!msg.contains("delta") || !msg["delta"].is_array() || msg["delta"].size() != 6)
        return error_frame(seq, "protocol", "move needs 'delta' with 6 numbers");
      std::array<double, 6> d{};
      for (int i = 0; i < 6; ++i) {
        // nlohmann parses NaN/Inf literals as null; treat those as non-finite.
        if (!msg["delta"][i].is_number()) return error_frame(seq, "protocol", "move delta must be finite numbers");
        d[i] = msg["delta"][i].get<double>();
      }
      return payload_json(session.step(Action6::from_array(d), model));
    }
    if (type == "select_plane") {
      if (!msg.contains("plane") || !msg["plane"].is_number_integer())
        return error_frame(seq, "protocol", "select_plane needs an integer 'plane'");
      session.select_plane(msg["plane"].get<int>());
      // Re-observe at the same pose so the client gets a fresh state frame.
      return payload_json(session.step(Action6::zero(), model));
    }
    if (type == "reset") return payload_json(session.reset(model));
    return error_frame(seq, "protocol", "unknown message type '" + type + "'");
  } catch (const Error &e) {
    return error_frame(seq, to_string(e.code()), e.what());
  }
}

// ---- server --------------------------------------------------------------------

struct GuidanceServer::Impl {
  boost::asio::io_context ioc{1};
  tcp::acceptor acceptor{ioc};
  SessionConfig base;
  mutable std::mutex model_mutex;
  ModelSnapshot model;
  std::atomic<bool> stopping{false};
  std::atomic<long> next_id{1};
  std::mutex threads_mutex;
  std::vector<std::thread> threads;

  ModelSnapshot snapshot() const {
    std::lock_guard lock(model_mutex);
    return model;
  }

  void serve_websocket(tcp::socket socket, http::request<http::string_body> req) {
    websocket::stream<tcp::socket> ws(std::move(socket));
    ws.accept(req);
    Session session("s" + std::to_string(next_id++), snapshot(), base);
    beast::flat_buffer buf;
    for (;;) {
      beast::error_code ec;
      ws.read(buf, ec);
      if (ec) return;  // closed or broken; the session dies with the connection
      const std::string text = beast::buffers_to_string(buf.data());
      buf.consume(buf.size());
      const auto reply = handle_message(session, text, snapshot()).dump();
      ws.text(true);
      ws.write(boost::asio::buffer(reply), ec);
      if (ec) return;
    }
  }

  void serve(tcp::socket socket) {
    beast::error_code ec;
    beast::flat_buffer buf;
    for (;;) {
      http::request<http::string_body> req;
      http::read(socket, buf, req, ec);
      if (ec) return;
      if (websocket::is_upgrade(req)) {
        try {
          serve_websocket(std::move(socket), std::move(req));
        } catch (const std::exception &) {
          // Client went away mid-frame.
        }
        return;
      }
      http::response<http::string_body> res;
      res.version(req.version());
      res.keep_alive(req.keep_alive());
      res.set(http::field::content_type, "application/json");
      if (req.method() == http::verb::get && req.target() == "/planes") {
        res.result(http::status::ok);
        res.body() = planes_json().dump();
      } else if (req.method() == http::verb::get && req.target() == "/health") {
        res.result(http::status::ok);
        res.body() = nlohmann::json{{"status", "ok"}}.dump();
      } else {
        res.result(http::status::not_found);
        res.body() = error_frame(-1, "not_found", std::string(req.target())).dump();
      }
      res.prepare_payload();
      http::write(socket, res, ec);
      if (ec || !res.keep_alive()) break;
    }
    socket.shutdown(tcp::socket::shutdown_send, ec);
  }
};

GuidanceServer::GuidanceServer(ModelSnapshot model, SessionConfig base, const std::string &address,
                               unsigned short port)
    : impl_(std::make_unique<Impl>()) {
  if (!model) fail(ErrorCode::invalid_argument, "server needs a model");
  impl_->model = std::move(model);
  impl_->base = base;
  try {
    const tcp::endpoint ep(boost::asio::ip::make_address(address), port);
    impl_->acceptor.open(ep.protocol());
    impl_->acceptor.set_option(boost::asio::socket_base::reuse_address(true));
    impl_->acceptor.bind(ep);
    impl_->acceptor.listen();
    port_ = impl_->acceptor.local_endpoint().port();
  } catch (const std::exception &e) {
    fail(ErrorCode::io, std::string("cannot listen on ") + address + ":" + std::to_string(port) + ": " + e.what());
  }
}

GuidanceServer::~GuidanceServer() {
  stop();
  std::lock_guard lock(impl_->threads_mutex);
  for (auto &t : impl_->threads)
    if (t.joinable()) t.join();
}

void GuidanceServer::run() {
  while (!impl_->stopping) {
    beast::error_code ec;
    tcp::socket socket(impl_->ioc);
    impl_->acceptor.accept(socket, ec);
    if (ec) {
      if (impl_->stopping) break;
      continue;
    }
    std::lock_guard lock(impl_->threads_mutex);
    impl_->threads.emplace_back([this, s = std::move(socket)]() mutable { impl_->serve(std::move(s)); });
  }
}

void GuidanceServer::stop() {
  if (impl_->stopping.exchange(true)) return;
  beast::error_code ec;
  impl_->acceptor.cancel(ec);
  impl_->acceptor.close(ec);
  // A blocking accept() is not interrupted by close() on every platform;
  // a throwaway connection wakes it.
  try {
    boost::asio::io_context ioc;
    tcp::socket s(ioc);
    s.connect({boost::asio::ip::make_address("127.0.0.1"), port_}, ec);
  } catch (...) {
  }
}

void GuidanceServer::swap_model(ModelSnapshot model) {
  if (!model) fail(ErrorCode::invalid_argument, "swap_model: null model");
  std::lock_guard lock(impl_->model_mutex);
  impl_->model = std::move(model);
}

ModelSnapshot GuidanceServer::model() const { return impl_->snapshot(); }

}  // namespace vaguide
