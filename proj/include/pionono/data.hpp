#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pionono/rng.hpp"
#include "pionono/tensor.hpp"

namespace pionono {

constexpr uint8_t kIgnoreLabel = 255;

struct RgbImage {
    int h = 0, w = 0;
    std::vector<uint8_t> rgb;  // h*w*3
};

struct ClassMap {
    int h = 0, w = 0;
    std::vector<uint8_t> label;  // class ids, 255 = unannotated
};

// Binary PPM (P6) / PGM (P5), maxval 255 enforced both ways.
void save_ppm(const std::string& path, const RgbImage& img);
RgbImage load_ppm(const std::string& path);
void save_pgm(const std::string& path, const ClassMap& mask);
ClassMap load_pgm(const std::string& path);

// Default palette: class 0 green, 1 yellow, 2 orange, 3 red; further classes
// are spaced around the hue wheel.
std::array<uint8_t, 3> class_color(int cls, int num_classes);

struct RaterArchetype {
    enum class Kind { Faithful, Confuser, UnderSegmenter, OverGrader };
    Kind kind = Kind::Faithful;
    int src_class = 0, dst_class = 0;  // confuser only
    double prob = 0.0;                 // p_confuse / p_erase / p_upgrade
    int jitter_radius = 2;
    double p_apply = 0.7;

    std::string to_string() const;
    // "faithful", "confuser:SRC:DST:P", "under:P", "over:P", each optionally
    // followed by ":jN" and ":paF".
    static RaterArchetype parse(const std::string& spec);
};

std::vector<RaterArchetype> parse_rater_specs(const std::string& comma_separated);

struct GroundTruth {
    RgbImage image;
    ClassMap mask;
};

// Background class 0 plus non-occluding random ellipses with classes in
// [1,C); image is the class palette fill with Gaussian noise (sigma 0.1 in
// [0,1] units). Deterministic per seed.
GroundTruth gen_ground_truth(int h, int w, int num_classes, int shapes_per_image, uint64_t seed);

// Corruption (gated by p_apply) followed by unconditional boundary jitter of
// each connected foreground region (dilate or erode by a radius drawn in
// [0, jitter_radius], diamond structuring element, 4-connectivity).
ClassMap apply_archetype(const ClassMap& gold, const RaterArchetype& arch, Rng& rng, int num_classes);

struct GenConfig {
    std::string out_dir;
    int train_count = 200;
    int test_count = 50;
    int size = 64;
    int num_classes = 4;
    int shapes_per_image = 4;
    double coverage = 1.0;
    uint64_t seed = 0;
    std::vector<RaterArchetype> archetypes;

    static std::vector<RaterArchetype> default_archetypes();
};

// Writes out_dir/train and out_dir/test (each: images/, raters/<r>/, gold/,
// meta.txt) plus out_dir/manifest.txt recording all generation parameters.
void gen_dataset(const GenConfig& cfg);

struct DatasetMeta {
    int num_classes = 0;
    int num_raters = 0;
    std::vector<std::string> class_names;
};

struct MultiRaterDataset {
    DatasetMeta meta;
    std::vector<std::string> ids;
    std::vector<RgbImage> images;
    std::vector<std::vector<int>> rater_mask;  // [image][rater] -> masks index or -1
    std::vector<int> gold_mask;                // [image] -> masks index or -1
    std::vector<ClassMap> masks;

    int num_images() const { return static_cast<int>(images.size()); }
    bool has_mask(int img, int rater) const { return rater_mask[static_cast<size_t>(img)][static_cast<size_t>(rater)] >= 0; }
    const ClassMap& mask(int img, int rater) const { return masks[static_cast<size_t>(rater_mask[static_cast<size_t>(img)][static_cast<size_t>(rater)])]; }
    bool has_gold(int img) const { return gold_mask[static_cast<size_t>(img)] >= 0; }
    const ClassMap& gold(int img) const { return masks[static_cast<size_t>(gold_mask[static_cast<size_t>(img)])]; }
};

MultiRaterDataset load_dataset(const std::string& dir);

// [3,H,W] float tensor scaled to [0,1].
Tensor image_to_tensor(const RgbImage& img);

// Dihedral-group augmentation code in [0,8): bit0 hflip, bit1 vflip,
// bit2 transpose (square inputs only).
void apply_d4_image(Tensor& chw, int code);
void apply_d4_mask(ClassMap& mask, int code);

}  // namespace pionono
