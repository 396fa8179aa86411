#pragma once

// Dataset ingestion (JSON Lines), stride-based window sampling, a synthetic
// pose-sequence generator for desk-scale training, and Gaussian corruption
// of 2D keypoints for robustness ablations.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtpca/random.hpp"
#include "rtpca/tensor.hpp"

namespace rtpca {

// One motion sequence: normalized-image 2D keypoints paired with millimetre,
// root-relative 3D ground truth.
struct PoseSequence {
  std::string subject;
  std::string action;
  double fps = 50.0;
  int64_t frames = 0;  // F_total
  int64_t joints = 0;  // J
  std::vector<double> joints2d;  // [F_total][J][2], row-major
  std::vector<double> joints3d;  // [F_total][J][3], row-major

  double& at2d(int64_t f, int64_t j, int64_t c) {
    return joints2d[static_cast<size_t>((f * joints + j) * 2 + c)];
  }
  double at2d(int64_t f, int64_t j, int64_t c) const {
    return joints2d[static_cast<size_t>((f * joints + j) * 2 + c)];
  }
  double& at3d(int64_t f, int64_t j, int64_t c) {
    return joints3d[static_cast<size_t>((f * joints + j) * 3 + c)];
  }
  double at3d(int64_t f, int64_t j, int64_t c) const {
    return joints3d[static_cast<size_t>((f * joints + j) * 3 + c)];
  }
};

struct Window {
  int64_t sequence = 0;  // index into the owning dataset
  int64_t start = 0;
  int64_t length = 0;  // F, including padding in eval mode
  int64_t valid = 0;   // frames that count toward metrics
};

enum class SampleMode { train, eval };

// ---------------------------------------------------------------------------
// JSON Lines dataset file
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> parse_pose_array(const nlohmann::json& arr,
                                            int64_t line, const char* key,
                                            int64_t coords, int64_t* frames,
                                            int64_t* joints) {
  auto fail = [line, key](const std::string& what) -> ParseError {
    return ParseError("line " + std::to_string(line) + ": " + key + ": " +
                      what);
  };
  if (!arr.is_array() || arr.empty()) throw fail("expected non-empty array");
  const int64_t f_total = static_cast<int64_t>(arr.size());
  int64_t j_count = -1;
  std::vector<double> out;
  for (const auto& frame : arr) {
    if (!frame.is_array()) throw fail("expected array of joint rows");
    if (j_count < 0) {
      j_count = static_cast<int64_t>(frame.size());
      if (j_count < 1) throw fail("no joints");
      out.reserve(static_cast<size_t>(f_total * j_count * coords));
    } else if (static_cast<int64_t>(frame.size()) != j_count) {
      throw fail("ragged joint count");
    }
    for (const auto& joint : frame) {
      if (!joint.is_array() ||
          static_cast<int64_t>(joint.size()) != coords) {
        throw fail("expected " + std::to_string(coords) +
                   " coordinates per joint");
      }
      for (const auto& c : joint) {
        if (!c.is_number()) throw fail("non-numeric coordinate");
        const double v = c.get<double>();
        if (!std::isfinite(v)) throw fail("non-finite coordinate");
        out.push_back(v);
      }
    }
  }
  *frames = f_total;
  *joints = j_count;
  return out;
}

}  // namespace detail

inline std::vector<PoseSequence> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("dataset: cannot open " + path);
  std::vector<PoseSequence> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    PoseSequence seq;
    try {
      seq.subject = j.at("subject").get<std::string>();
      seq.action = j.at("action").get<std::string>();
      seq.fps = j.at("fps").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!(seq.fps > 0.0)) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": fps must be positive");
    }
    int64_t f2 = 0, j2 = 0, f3 = 0, j3 = 0;
    seq.joints2d = detail::parse_pose_array(j.at("joints2d"), line_no,
                                            "joints2d", 2, &f2, &j2);
    seq.joints3d = detail::parse_pose_array(j.at("joints3d"), line_no,
                                            "joints3d", 3, &f3, &j3);
    if (f2 != f3 || j2 != j3) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": joints2d is [" + std::to_string(f2) + "][" +
                       std::to_string(j2) + "] but joints3d is [" +
                       std::to_string(f3) + "][" + std::to_string(j3) + "]");
    }
    seq.frames = f2;
    seq.joints = j2;
    out.push_back(std::move(seq));
  }
  return out;
}

inline nlohmann::ordered_json sequence_to_json(const PoseSequence& seq) {
  nlohmann::ordered_json j;
  j["subject"] = seq.subject;
  j["action"] = seq.action;
  j["fps"] = seq.fps;
  auto pack = [](const std::vector<double>& v, int64_t frames, int64_t joints,
                 int64_t coords) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    size_t i = 0;
    for (int64_t f = 0; f < frames; ++f) {
      nlohmann::ordered_json frame = nlohmann::ordered_json::array();
      for (int64_t jt = 0; jt < joints; ++jt) {
        nlohmann::ordered_json joint = nlohmann::ordered_json::array();
        for (int64_t c = 0; c < coords; ++c) joint.push_back(v[i++]);
        frame.push_back(std::move(joint));
      }
      arr.push_back(std::move(frame));
    }
    return arr;
  };
  j["joints2d"] = pack(seq.joints2d, seq.frames, seq.joints, 2);
  j["joints3d"] = pack(seq.joints3d, seq.frames, seq.joints, 3);
  return j;
}

inline void save_dataset(const std::string& path,
                         const std::vector<PoseSequence>& seqs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("dataset: cannot write " + path);
  for (const auto& seq : seqs) {
    out << sequence_to_json(seq).dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Stride sampling: non-overlapping windows whose stride equals their length
// ---------------------------------------------------------------------------

// Train mode drops a trailing remainder shorter than F. Eval mode keeps it
// as a final window padded by repeating the last frame; the padded frames
// carry valid == F_total - start so they can be excluded from metrics.
inline std::vector<Window> stride_sample(const PoseSequence& seq, int64_t f,
                                         SampleMode mode) {
  if (f < 1) throw RangeError("stride_sample: window length must be >= 1");
  std::vector<Window> out;
  int64_t start = 0;
  while (start + f <= seq.frames) {
    out.push_back(Window{0, start, f, f});
    start += f;
  }
  if (mode == SampleMode::eval && start < seq.frames) {
    out.push_back(Window{0, start, f, seq.frames - start});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic sequences: kinematic-tree base pose + low-frequency sinusoids,
// projected to 2D through a fixed pinhole camera
// ---------------------------------------------------------------------------

// The skeleton root sits at a fixed camera-frame offset; 2D keypoints are
// the perspective division of (root + joint) with unit focal length. These
// constants are part of the generator contract so stored 2D can be
// reproduced from stored root-relative 3D.
inline constexpr double kSynthRootDepthMm = 4000.0;

inline void synth_project(double x_mm, double y_mm, double z_mm, double* u,
                          double* v) {
  const double z = z_mm + kSynthRootDepthMm;
  *u = x_mm / z;
  *v = y_mm / z;
}

namespace detail {

struct Bone {
  int parent;
  double dx, dy, dz;  // rest offset from parent, mm
};

// 17-joint human-like tree: pelvis, right leg, left leg, spine/head chain,
// left arm, right arm.
inline std::vector<Bone> skeleton_tree(int64_t joints) {
  if (joints == 17) {
    return {
        {-1, 0, 0, 0},        // 0 pelvis
        {0, -130, 0, 0},      // 1 right hip
        {1, 0, -440, 0},      // 2 right knee
        {2, 0, -440, 0},      // 3 right ankle
        {0, 130, 0, 0},       // 4 left hip
        {4, 0, -440, 0},      // 5 left knee
        {5, 0, -440, 0},      // 6 left ankle
        {0, 0, 230, 0},       // 7 spine
        {7, 0, 250, 0},       // 8 thorax
        {8, 0, 110, 0},       // 9 neck
        {9, 0, 110, 0},       // 10 head
        {8, 150, 40, 0},      // 11 left shoulder
        {11, 90, -250, 0},    // 12 left elbow
        {12, 60, -240, 0},    // 13 left wrist
        {8, -150, 40, 0},     // 14 right shoulder
        {14, -90, -250, 0},   // 15 right elbow
        {15, -60, -240, 0},   // 16 right wrist
    };
  }
  // generic chain for other joint counts
  std::vector<Bone> bones;
  bones.push_back({-1, 0, 0, 0});
  for (int64_t j = 1; j < joints; ++j) {
    const double dir = (j % 2 == 0) ? -1.0 : 1.0;
    bones.push_back({static_cast<int>(j - 1), 120.0 * dir, 160.0, 0.0});
  }
  return bones;
}

}  // namespace detail

inline std::vector<PoseSequence> synth_generate(uint64_t seed,
                                                int64_t n_sequences,
                                                int64_t f_total, int64_t joints,
                                                double fps) {
  if (n_sequences < 1 || f_total < 1 || joints < 1 || !(fps > 0.0)) {
    throw ConfigError("synth_generate: invalid arguments");
  }
  const std::vector<detail::Bone> bones = detail::skeleton_tree(joints);
  static const char* kActions[] = {"walk", "wave", "stretch", "sway"};

  std::vector<PoseSequence> out;
  for (int64_t s = 0; s < n_sequences; ++s) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(s)));
    PoseSequence seq;
    seq.subject = "S" + std::to_string(s + 1);
    seq.action = kActions[s % 4];
    seq.fps = fps;
    seq.frames = f_total;
    seq.joints = joints;
    seq.joints2d.resize(static_cast<size_t>(f_total * joints * 2));
    seq.joints3d.resize(static_cast<size_t>(f_total * joints * 3));

    // Per joint and axis: two sinusoids, <= ~1.5 Hz, bounded amplitude. The
    // depth axis moves less so the lifting task stays well conditioned.
    struct Harmonic {
      double amp, freq, phase;
    };
    std::vector<Harmonic> motion(static_cast<size_t>(joints) * 3 * 2);
    for (int64_t j = 0; j < joints; ++j) {
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t h = 0; h < 2; ++h) {
          const double max_amp = (c == 2) ? 10.0 : 40.0;
          Harmonic& hm = motion[static_cast<size_t>((j * 3 + c) * 2 + h)];
          hm.amp = (j == 0) ? 0.0 : rng.uniform(0.2, 1.0) * max_amp / (h + 1);
          hm.freq = rng.uniform(0.2, 1.5);
          hm.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        }
      }
    }

    // rest pose from the kinematic tree
    std::vector<double> rest(static_cast<size_t>(joints) * 3);
    for (int64_t j = 0; j < joints; ++j) {
      const auto& b = bones[static_cast<size_t>(j)];
      double px = 0, py = 0, pz = 0;
      if (b.parent >= 0) {
        px = rest[static_cast<size_t>(b.parent) * 3];
        py = rest[static_cast<size_t>(b.parent) * 3 + 1];
        pz = rest[static_cast<size_t>(b.parent) * 3 + 2];
      }
      rest[static_cast<size_t>(j) * 3] = px + b.dx;
      rest[static_cast<size_t>(j) * 3 + 1] = py + b.dy;
      rest[static_cast<size_t>(j) * 3 + 2] = pz + b.dz;
    }

    for (int64_t f = 0; f < f_total; ++f) {
      const double t = static_cast<double>(f) / fps;
      for (int64_t j = 0; j < joints; ++j) {
        double pos[3];
        for (int64_t c = 0; c < 3; ++c) {
          double v = rest[static_cast<size_t>(j * 3 + c)];
          for (int64_t h = 0; h < 2; ++h) {
            const auto& hm = motion[static_cast<size_t>((j * 3 + c) * 2 + h)];
            v += hm.amp *
                 std::sin(2.0 * 3.14159265358979323846 * hm.freq * t +
                          hm.phase);
          }
          pos[c] = v;
        }
        seq.at3d(f, j, 0) = pos[0];
        seq.at3d(f, j, 1) = pos[1];
        seq.at3d(f, j, 2) = pos[2];
        double u = 0, v = 0;
        synth_project(pos[0], pos[1], pos[2], &u, &v);
        seq.at2d(f, j, 0) = u;
        seq.at2d(f, j, 1) = v;
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

// i.i.d. zero-mean Gaussian perturbation of the 2D keypoints only.
inline PoseSequence add_gaussian_noise(const PoseSequence& seq, double sigma,
                                       uint64_t seed) {
  if (sigma < 0.0) throw ConfigError("add_gaussian_noise: sigma must be >= 0");
  PoseSequence out = seq;
  if (sigma == 0.0) return out;
  Rng rng(seed);
  for (auto& v : out.joints2d) v += rng.normal(0.0, sigma);
  return out;
}

}  // namespace rtpca
