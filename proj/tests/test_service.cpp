// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <thread>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "vaguide/error.hpp"
#include "vaguide/service.hpp"

using namespace vaguide;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = boost::asio::ip::tcp;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.backbone.image_size = 16;
  c.backbone.patch = 4;
  c.backbone.dim = 16;
  c.backbone.depth = 2;
  c.backbone.heads = 2;
  c.adapter.r = 8;
  c.adapter.heads = 2;
  c.adapter.zero_init_up = false;
  c.seq_dim = 16;
  c.hidden = 16;
  c.output_scale = 10.0;
  return c;
}

SessionConfig small_session() {
  SessionConfig s;
  s.image_size = 16;
  s.phantom_seed = 3;
  s.history_capacity = 8;
  return s;
}

// Deterministic clock: 0.1 s per call.
Session::Clock ticking() {
  auto t = std::make_shared<double>(0.0);
  return [t] { return *t += 0.1; };
}

ModelSnapshot snapshot() { return std::make_shared<const GuidanceModel<float>>(small_model()); }

// Offline reconstruction of the model input from the history buffer.
SequenceSample rebuild(const std::deque<HistoryEntry> &h, const std::vector<int> &idx) {
  SequenceSample s;
  for (int i : idx) s.images.push_back(h[i].image);
  for (std::size_t i = 0; i + 1 < idx.size(); ++i) s.actions.push_back(relative_action(h[idx[i]].pose, h[idx[i + 1]].pose));
  s.frame_indices = idx;
  s.query_index = idx.back();
  return s;
}

}  // namespace

TEST_CASE("first step uses the fallback and still returns a full payload") {
  Session s("a", snapshot(), small_session(), ticking());
  const auto p = s.step(Action6::zero());
  CHECK(p.seq == 1);
  CHECK(p.fallback);
  CHECK(p.history_length == 1);
  CHECK(p.image.width == 16);
  CHECK(p.sample_indices == std::vector<int>{0, 0, 0, 0});
  for (const auto &g : p.guidance)
    for (std::size_t d = 0; d < 6; ++d) CHECK(std::isfinite(g[d]));
  for (const auto &d : p.plane_dist) CHECK(std::isfinite(d.trans_mm));
}

TEST_CASE("zero delta keeps the pose while the heart keeps beating") {
  Session s("a", snapshot(), small_session(), ticking());
  const auto a = s.step(Action6::zero());
  const auto b = s.step(Action6::zero());
  CHECK(a.pose == b.pose);
  CHECK(!(a.image == b.image));
  CHECK(s.history()[0].timestamp_s < s.history()[1].timestamp_s);
}

TEST_CASE("history capacity and clamping") {
  Session s("a", snapshot(), small_session(), ticking());
  for (int i = 0; i < 20; ++i) s.step(Action6{{1, 0, 0}, {0, 0, 0}});
  CHECK(s.history().size() == 8);
  for (std::size_t i = 1; i < s.history().size(); ++i)
    CHECK(s.history()[i - 1].timestamp_s <= s.history()[i].timestamp_s);

  s.step(Action6{{1e5, -1e5, 1e5}, {0, 0, 0}});
  const auto &b = s.phantom().bounds;
  for (int i = 0; i < 3; ++i) {
    CHECK(s.pose().position()[i] >= b.lo[i]);
    CHECK(s.pose().position()[i] <= b.hi[i]);
  }
}

TEST_CASE("service prediction equals offline predict on the same history") {
  const auto model = snapshot();
  Session s("a", model, small_session(), ticking());
  for (int i = 0; i < 12; ++i) {
    const auto p = s.step(Action6{{0.5 * i, -1, 0.3}, {1, 0.5, -0.5}});
    const auto offline = model->predict(rebuild(s.history(), p.sample_indices));
    for (int k = 0; k < kNumPlanes; ++k) {
      const auto x = p.guidance[k].to_array(), y = offline[k].to_array();
      CHECK(std::memcmp(x.data(), y.data(), sizeof x) == 0);
    }
  }
}

TEST_CASE("messages: move, select, reset and errors") {
  const auto model = snapshot();
  Session s("a", model, small_session(), ticking());
  auto r = handle_message(s, R"({"type":"move","delta":[1,2,3,4,5,6]})", model);
  CHECK(r["type"] == "state");
  CHECK(r["seq"] == 1);
  CHECK(r["guidance"].size() == 10);
  CHECK(r["guidance"][0].size() == 6);
  CHECK(r["pose"].size() == 7);
  CHECK(r["debug"]["plane_dist"].size() == 10);
  const auto img = decode_image_b64(r["image"]["w"], r["image"]["h"], r["image"]["b64"]);
  CHECK(img == s.history().back().image);

  r = handle_message(s, R"({"type":"select_plane","plane":5})", model);
  CHECK(r["selected"] == 5);
  CHECK(r["seq"] == 2);

  const Pose before = s.pose();
  const std::size_t hist = s.history().size();
  for (const char *bad : {R"({"type":"move","delta":[1e999,0,0,0,0,0]})", R"({"type":"move","delta":[1,2]})",
                          R"({"type":"select_plane","plane":11})", R"({"type":"fly"})", "not json", "[]"}) {
    r = handle_message(s, bad, model);
    CHECK_MESSAGE(r["type"] == "error", bad);
    CHECK(s.pose() == before);
    CHECK(s.history().size() == hist);
  }
  CHECK(s.selected() == 5);

  r = handle_message(s, R"({"type":"reset"})", model);
  CHECK(r["type"] == "state");
  CHECK(r["history"] == 1);
  CHECK(r["seq"] == 3);
}

TEST_CASE("interleaved sessions do not observe each other") {
  const auto model = snapshot();
  auto script = [](int i) { return Action6{{std::sin(i) * 3, std::cos(i) * 2, 1}, {0.5 * i, -1, 2}}; };
  // Reference: each session alone.
  std::vector<GuidancePayload> solo_a, solo_b;
  {
    Session a("a", model, small_session(), ticking());
    for (int i = 0; i < 10; ++i) solo_a.push_back(a.step(script(i)));
    SessionConfig cb = small_session();
    cb.phantom_seed = 4;
    Session b("b", model, cb, ticking());
    for (int i = 0; i < 10; ++i) solo_b.push_back(b.step(script(-i)));
  }
  Session a("a", model, small_session(), ticking());
  SessionConfig cb = small_session();
  cb.phantom_seed = 4;
  Session b("b", model, cb, ticking());
  for (int i = 0; i < 10; ++i) {
    const auto pa = a.step(script(i));
    const auto pb = b.step(script(-i));
    CHECK(pa.pose == solo_a[i].pose);
    CHECK(pa.image == solo_a[i].image);
    CHECK(pb.pose == solo_b[i].pose);
    for (int k = 0; k < kNumPlanes; ++k) {
      CHECK(pa.guidance[k] == solo_a[i].guidance[k]);
      CHECK(pb.guidance[k] == solo_b[i].guidance[k]);
    }
  }
}

TEST_CASE("base64 image round trip") {
  SliceImage img{3, 2, {0.0f, 1.0f, -2.5f, 1e-30f, 0.125f, 7.0f}};
  CHECK(decode_image_b64(3, 2, encode_image_b64(img)) == img);
  CHECK_THROWS_AS(decode_image_b64(4, 2, encode_image_b64(img)), Error);
}

TEST_CASE("desk latency at the default configuration") {
  ModelConfig mc;  // 64x64 images, default widths
  const auto model = std::make_shared<const GuidanceModel<float>>(mc);
  SessionConfig sc;
  Session s("lat", model, sc);
  for (int i = 0; i < 4; ++i) s.step(Action6{{1, 0, 0}, {0, 0, 1}});
  const int n = 10;
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n; ++i) s.step(Action6{{0.5, 0.5, 0}, {0, 1, 0}});
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / n;
  MESSAGE("session step latency: " << ms << " ms");
  CHECK(ms < 200.0);
}

namespace {

std::string http_get(unsigned short port, const std::string &target, int *status) {
  boost::asio::io_context ioc;
  tcp::socket sock(ioc);
  sock.connect({boost::asio::ip::make_address("127.0.0.1"), port});
  http::request<http::empty_body> req{http::verb::get, target, 11};
  req.set(http::field::host, "127.0.0.1");
  req.keep_alive(false);
  http::write(sock, req);
  beast::flat_buffer buf;
  http::response<http::string_body> res;
  http::read(sock, buf, res);
  *status = res.result_int();
  beast::error_code ec;
  sock.shutdown(tcp::socket::shutdown_both, ec);
  return res.body();
}

struct WsClient {
  boost::asio::io_context ioc;
  websocket::stream<tcp::socket> ws{ioc};
  explicit WsClient(unsigned short port) {
    ws.next_layer().connect({boost::asio::ip::make_address("127.0.0.1"), port});
    ws.handshake("127.0.0.1", "/session");
  }
  nlohmann::json send(const nlohmann::json &msg) {
    ws.write(boost::asio::buffer(msg.dump()));
    beast::flat_buffer buf;
    ws.read(buf);
    return nlohmann::json::parse(beast::buffers_to_string(buf.data()));
  }
  ~WsClient() {
    beast::error_code ec;
    ws.close(websocket::close_code::normal, ec);
  }
};

}  // namespace

TEST_CASE("server: HTTP endpoints and scripted socket clients") {
  const auto model = snapshot();
  GuidanceServer server(model, small_session(), "127.0.0.1", 0);
  std::thread th([&] { server.run(); });

  int status = 0;
  const auto planes = nlohmann::json::parse(http_get(server.port(), "/planes", &status));
  CHECK(status == 200);
  REQUIRE(planes.size() == 10);
  CHECK(planes[0]["name"] == "PLAX");
  CHECK(planes[9]["id"] == 10);
  CHECK(nlohmann::json::parse(http_get(server.port(), "/health", &status))["status"] == "ok");
  http_get(server.port(), "/nope", &status);
  CHECK(status == 404);

  {
    WsClient c1(server.port()), c2(server.port());
    long last1 = 0, last2 = 0;
    for (int i = 0; i < 20; ++i) {
      const auto r1 = c1.send({{"type", "move"}, {"delta", {1, 0, 0, 0, 0, 1}}});
      const auto r2 = c2.send({{"type", "move"}, {"delta", {0, -1, 0, 1, 0, 0}}});
      REQUIRE(r1["type"] == "state");
      REQUIRE(r2["type"] == "state");
      CHECK(r1["seq"].get<long>() > last1);
      CHECK(r2["seq"].get<long>() > last2);
      last1 = r1["seq"];
      last2 = r2["seq"];
    }
    CHECK(last1 == 20);
    CHECK(last2 == 20);
    const auto e = c1.send({{"type", "move"}, {"delta", {1, 2}}});
    CHECK(e["type"] == "error");
    CHECK(c1.send({{"type", "move"}, {"delta", {0, 0, 0, 0, 0, 0}}})["seq"] == 21);
  }

  server.swap_model(snapshot());
  server.stop();
  th.join();
}

TEST_CASE("listening on a taken port is an I/O error") {
  GuidanceServer a(snapshot(), small_session(), "127.0.0.1", 0);
  try {
    GuidanceServer b(snapshot(), small_session(), "127.0.0.1", a.port());
    FAIL("expected an I/O error");
  } catch (const Error &e) {
    CHECK(e.code() == ErrorCode::io);
  }
}
