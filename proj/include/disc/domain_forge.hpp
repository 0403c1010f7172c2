#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "disc/tensor.hpp"

namespace disc {

struct DatasetSpec {
    int n_classes = 8;
    int channels = 3;
    int height = 32;
    int width = 32;
    int train_count = 4000;
    int val_count = 400;
    int test_count = 2000;
    std::uint64_t seed = 0;

    void validate() const;
};

enum class Weather { clear, fog, rain, snow };

std::string weather_name(Weather w);
Weather weather_from_name(const std::string& name);

struct DomainSpec {
    Weather kind = Weather::clear;
    float severity = 0.8f;
    std::uint64_t seed = 0;

    std::string task_id() const { return weather_name(kind); }
    // clear forces severity 0
    DomainSpec normalized() const {
        DomainSpec d = *this;
        if (d.kind == Weather::clear) d.severity = 0.0f;
        return d;
    }
    void validate() const {
        if (!(severity >= 0.0f && severity <= 1.0f))
            throw ConfigError("domain spec: severity must be in [0, 1]");
    }
};

inline std::vector<DomainSpec> default_domains(float severity = 0.8f, std::uint64_t seed = 0) {
    return {{Weather::clear, 0.0f, seed},
            {Weather::fog, severity, seed},
            {Weather::rain, severity, seed},
            {Weather::snow, severity, seed}};
}

struct Split {
    Tensor images;            // [N, C, H, W], values in [0, 1]
    std::vector<int> labels;  // [N]

    int count() const { return images.data.empty() ? 0 : images.dim(0); }
};

struct Dataset {
    DatasetSpec spec;
    Split train, val, test;
};

struct Task {
    std::string task_id;
    DomainSpec domain;
    Split train, val, test;
};

// Ordered tasks over one shared label space; the order is the learning order.
struct TaskSequence {
    int n_classes = 0;
    std::vector<Task> tasks;

    const Task& at(const std::string& task_id) const;
    int index_of(const std::string& task_id) const;  // -1 if absent
};

// Each image holds one class-determined glyph (shape family x fill pattern)
// at a seeded random position/scale/rotation over a seeded textured
// background. Classes are balanced within +-1 and splits draw from disjoint
// seed streams.
Dataset gen_base(const DatasetSpec& spec);

// Analytic haze: I' = (1 - a(p)) * I + a(p) * 0.9, a(p) = severity *
// (0.5 + 0.5 * g(p)) with g a vertical gradient, 1 at the top row.
void apply_fog(Tensor& image, float severity);

// round(severity * 60) semi-transparent bright streaks at one shared seeded
// angle in [60, 80] degrees from horizontal, then a 3x3 box blur blended in
// proportion to severity.
void apply_rain(Tensor& image, float severity, std::uint64_t seed);

// Seeded white speckles (1-2 px flakes) covering fraction severity * 0.10 of
// pixels, plus a brightness lift of severity * 0.15, clamped to [0, 1].
void apply_snow(Tensor& image, float severity, std::uint64_t seed);

// Corruption dispatch for one [C, H, W] image.
void apply_domain(Tensor& image, const DomainSpec& domain, std::uint64_t image_seed);

// Applies each domain's corruption to all three splits; labels unchanged.
// The first spec must be clear.
TaskSequence make_sequence(const Dataset& base, const std::vector<DomainSpec>& domains);

// --- persistence ---------------------------------------------------------
// Split file: magic "DISCDSET", version u16, dims (n, c, h, w as u32), then
// the image tensor in the checkpoint array format (key, count u64, f32 LE)
// followed by labels (key, count u64, u16 each).

void save_split(const Split& split, const std::string& path);
Split load_split(const std::string& path);

void save_sequence(const TaskSequence& seq, const DatasetSpec& spec, const std::string& dir,
                   bool force);
TaskSequence load_sequence(const std::string& dir);

// 8-bit RGB PNG for inspection; image is [3, H, W] in [0, 1].
void write_png_rgb(const Tensor& image, const std::string& path);

// View of one image as a [C, H, W] tensor copy.
Tensor image_at(const Tensor& images, int index);

}  // namespace disc
