// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vaguide/model.hpp"
#include "vaguide/phantom.hpp"

namespace vaguide {

struct SessionConfig {
  std::uint64_t phantom_seed = 1;
  int image_size = 64;
  double fov_mm = 120.0;
  double heart_rate_hz = 1.2;
  std::size_t history_capacity = 64;  // raised to at least L
  std::uint64_t seed = 1;             // speckle and sampling streams
};

struct HistoryEntry {
  SliceImage image;
  Pose pose;
  double timestamp_s = 0.0;
};

struct GuidancePayload {
  long seq = 0;
  SliceImage image;
  Pose pose;
  std::array<Action6, kNumPlanes> guidance{};
  // Debug overlay: distance from the probe to each true standard plane.
  std::array<PoseDistance, kNumPlanes> plane_dist{};
  int selected = 1;  // 1-based plane id
  std::size_t history_length = 0;
  bool fallback = false;
  std::vector<int> sample_indices;  // history positions fed to the model
};

// Builds the model input from a rolling history: the newest entry is the
// query, earlier entries are drawn by segmental sampling with the
// short-history fallback.
SequenceSample history_sample(const std::deque<HistoryEntry> &history, int L, std::uint64_t rng_seed);

using ModelSnapshot = std::shared_ptr<const GuidanceModel<float>>;

// One probe session. Not thread-safe: the owning connection serialises calls.
class Session {
 public:
  using Clock = std::function<double()>;  // seconds since session start

  Session(std::string id, ModelSnapshot model, SessionConfig cfg, Clock clock = {});

  const std::string &id() const { return id_; }
  const Pose &pose() const { return pose_; }
  const std::deque<HistoryEntry> &history() const { return history_; }
  int selected() const { return selected_; }
  const Phantom &phantom() const { return phantom_; }

  // Moves the probe by delta (in the probe frame), clamps the position to
  // the phantom bounds, renders, records and predicts. Throws
  // ErrorCode::invalid_argument on a non-finite delta without touching the
  // session.
  GuidancePayload step(const Action6 &delta, const ModelSnapshot &model = nullptr);
  // Places the probe at an absolute pose (clamped) and observes.
  GuidancePayload place(const Pose &pose, const ModelSnapshot &model = nullptr);
  void select_plane(int plane_id);
  // Clears the history and returns the probe to its start pose.
  GuidancePayload reset(const ModelSnapshot &model = nullptr);

  static Pose start_pose(const Phantom &ph);

 private:
  GuidancePayload observe(const ModelSnapshot &model);

  std::string id_;
  ModelSnapshot model_;
  SessionConfig cfg_;
  Clock clock_;
  Phantom phantom_;
  StandardPlaneSet planes_;
  Pose pose_;
  std::deque<HistoryEntry> history_;
  int selected_ = 1;
  long seq_ = 0;
  long renders_ = 0;
};

// Wire format helpers. Images travel as base64 of the little-endian float32
// pixel array, row-major.
std::string encode_image_b64(const SliceImage &img);
SliceImage decode_image_b64(int width, int height, const std::string &b64);
nlohmann::json payload_json(const GuidancePayload &p);
nlohmann::json error_frame(long seq, const std::string &code, const std::string &msg);
nlohmann::json planes_json();

// Applies one client message to the session and returns the reply frame
// (state or error). Errors never modify the session.
nlohmann::json handle_message(Session &session, const std::string &text, const ModelSnapshot &model);

// HTTP + WebSocket front end: GET /planes, GET /health, and one session per
// upgraded connection. Each connection runs on its own thread.
class GuidanceServer {
 public:
  GuidanceServer(ModelSnapshot model, SessionConfig base, const std::string &address, unsigned short port);
  ~GuidanceServer();

  unsigned short port() const { return port_; }
  // Blocks until stop() is called.
  void run();
  void stop();
  // Atomically replaces the model used for subsequent steps.
  void swap_model(ModelSnapshot model);
  ModelSnapshot model() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  unsigned short port_ = 0;
};

}  // namespace vaguide
