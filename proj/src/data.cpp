#include "pionono/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pionono/errors.hpp"

namespace fs = std::filesystem;

namespace pionono {

// ---------------------------------------------------------------------------
// PNM IO
// ---------------------------------------------------------------------------

namespace {

int pnm_read_int(std::istream& in, const std::string& path) {
    // skip whitespace and '#' comments
    int ch = in.get();
    while (ch != EOF && (std::isspace(ch) || ch == '#')) {
        if (ch == '#')
            while (ch != EOF && ch != '\n') ch = in.get();
        ch = in.get();
    }
    if (ch == EOF || !std::isdigit(ch)) throw DataError("malformed PNM header in " + path);
    int v = 0;
    while (ch != EOF && std::isdigit(ch)) {
        v = v * 10 + (ch - '0');
        ch = in.get();
    }
    if (ch == EOF) throw DataError("truncated PNM header in " + path);
    in.unget();
    return v;
}

void pnm_read_header(std::istream& in, const std::string& path, const char* magic, int& w, int& h) {
    char m0 = static_cast<char>(in.get()), m1 = static_cast<char>(in.get());
    if (m0 != magic[0] || m1 != magic[1])
        throw DataError("bad magic in " + path + " (expected " + magic + ")");
    w = pnm_read_int(in, path);
    h = pnm_read_int(in, path);
    int maxval = pnm_read_int(in, path);
    if (maxval != 255) throw DataError("unsupported maxval " + std::to_string(maxval) + " in " + path);
    int ch = in.get();  // single whitespace before payload
    if (ch == EOF || !std::isspace(ch)) throw DataError("malformed PNM header in " + path);
    if (w <= 0 || h <= 0) throw DataError("bad dimensions in " + path);
}

}  // namespace

void save_ppm(const std::string& path, const RgbImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "P6\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (!out) throw DataError("write failed for " + path);
}

RgbImage load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    RgbImage img;
    pnm_read_header(in, path, "P6", img.w, img.h);
    img.rgb.resize(static_cast<size_t>(img.w) * img.h * 3);
    in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw DataError("truncated pixel data in " + path);
    return img;
}

void save_pgm(const std::string& path, const ClassMap& mask) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "P5\n" << mask.w << " " << mask.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(mask.label.data()), static_cast<std::streamsize>(mask.label.size()));
    if (!out) throw DataError("write failed for " + path);
}

ClassMap load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    ClassMap mask;
    pnm_read_header(in, path, "P5", mask.w, mask.h);
    mask.label.resize(static_cast<size_t>(mask.w) * mask.h);
    in.read(reinterpret_cast<char*>(mask.label.data()), static_cast<std::streamsize>(mask.label.size()));
    if (in.gcount() != static_cast<std::streamsize>(mask.label.size()))
        throw DataError("truncated pixel data in " + path);
    return mask;
}

std::array<uint8_t, 3> class_color(int cls, int num_classes) {
    static const std::array<std::array<uint8_t, 3>, 4> base = {{
        {0, 160, 40},    // green
        {235, 220, 0},   // yellow
        {245, 130, 10},  // orange
        {220, 20, 20},   // red
    }};
    if (cls >= 0 && cls < 4) return base[static_cast<size_t>(cls)];
    // golden-angle hue for anything beyond the standard palette
    double hue = std::fmod(0.618033988749895 * cls, 1.0) * 6.0;
    int i = static_cast<int>(hue);
    double f = hue - i;
    auto u8 = [](double v) { return static_cast<uint8_t>(std::lround(255.0 * v)); };
    double q = 1.0 - f;
    switch (i % 6) {
        case 0: return {u8(1), u8(f), 0};
        case 1: return {u8(q), u8(1), 0};
        case 2: return {0, u8(1), u8(f)};
        case 3: return {0, u8(q), u8(1)};
        case 4: return {u8(f), 0, u8(1)};
        default: return {u8(1), 0, u8(q)};
    }
    (void)num_classes;
}

// ---------------------------------------------------------------------------
// Archetype spec parsing
// ---------------------------------------------------------------------------

std::string RaterArchetype::to_string() const {
    std::ostringstream os;
    switch (kind) {
        case Kind::Faithful: os << "faithful"; break;
        case Kind::Confuser: os << "confuser:" << src_class << ":" << dst_class << ":" << prob; break;
        case Kind::UnderSegmenter: os << "under:" << prob; break;
        case Kind::OverGrader: os << "over:" << prob; break;
    }
    os << ":j" << jitter_radius << ":pa" << p_apply;
    return os.str();
}

RaterArchetype RaterArchetype::parse(const std::string& spec) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ':')) parts.push_back(tok);
    if (parts.empty()) throw UsageError("empty rater spec");

    RaterArchetype a;
    size_t i = 1;
    auto need = [&](size_t n) {
        if (parts.size() < 1 + n) throw UsageError("rater spec '" + spec + "' is missing parameters");
    };
    auto num = [&](const std::string& s) {
        try {
            size_t pos = 0;
            double v = std::stod(s, &pos);
            if (pos != s.size()) throw UsageError("");
            return v;
        } catch (...) {
            throw UsageError("bad number '" + s + "' in rater spec '" + spec + "'");
        }
    };
    if (parts[0] == "faithful") {
        a.kind = Kind::Faithful;
    } else if (parts[0] == "confuser") {
        need(3);
        a.kind = Kind::Confuser;
        a.src_class = static_cast<int>(num(parts[1]));
        a.dst_class = static_cast<int>(num(parts[2]));
        a.prob = num(parts[3]);
        i = 4;
    } else if (parts[0] == "under") {
        need(1);
        a.kind = Kind::UnderSegmenter;
        a.prob = num(parts[1]);
        i = 2;
    } else if (parts[0] == "over") {
        need(1);
        a.kind = Kind::OverGrader;
        a.prob = num(parts[1]);
        i = 2;
    } else {
        throw UsageError("unknown rater kind '" + parts[0] + "' in spec '" + spec + "'");
    }
    for (; i < parts.size(); ++i) {
        const std::string& p = parts[i];
        if (p.size() > 1 && p[0] == 'j')
            a.jitter_radius = static_cast<int>(num(p.substr(1)));
        else if (p.size() > 2 && p[0] == 'p' && p[1] == 'a')
            a.p_apply = num(p.substr(2));
        else
            throw UsageError("unknown rater spec field '" + p + "' in '" + spec + "'");
    }
    if (a.prob < 0 || a.prob > 1 || a.p_apply < 0 || a.p_apply > 1 || a.jitter_radius < 0)
        throw UsageError("rater spec '" + spec + "' has out-of-range parameters");
    return a;
}

std::vector<RaterArchetype> parse_rater_specs(const std::string& s) {
    std::vector<RaterArchetype> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(RaterArchetype::parse(tok));
    if (out.empty()) throw UsageError("need at least one rater spec");
    return out;
}

std::vector<RaterArchetype> GenConfig::default_archetypes() {
    RaterArchetype faithful;
    RaterArchetype confuser;
    confuser.kind = RaterArchetype::Kind::Confuser;
    confuser.src_class = 2;
    confuser.dst_class = 3;
    confuser.prob = 0.8;
    RaterArchetype under;
    under.kind = RaterArchetype::Kind::UnderSegmenter;
    under.prob = 0.5;
    return {faithful, faithful, confuser, under};
}

// ---------------------------------------------------------------------------
// Ground-truth generation
// ---------------------------------------------------------------------------

GroundTruth gen_ground_truth(int h, int w, int num_classes, int shapes_per_image, uint64_t seed) {
    if (num_classes < 2) throw ShapeError("gen_ground_truth needs C >= 2, got " + std::to_string(num_classes));
    Rng rng(seed);
    GroundTruth gt;
    gt.mask.h = h;
    gt.mask.w = w;
    gt.mask.label.assign(static_cast<size_t>(h) * w, 0);

    for (int s = 0; s < shapes_per_image; ++s) {
        for (int attempt = 0; attempt < 40; ++attempt) {
            int rx = static_cast<int>(rng.range(5, 14));
            int ry = static_cast<int>(rng.range(5, 14));
            int margin = std::max(rx, ry) + 2;
            if (2 * margin + 2 >= std::min(h, w)) continue;
            int cx = static_cast<int>(rng.range(margin, w - 1 - margin));
            int cy = static_cast<int>(rng.range(margin, h - 1 - margin));
            double angle = rng.uniform(0.0, 3.14159265358979323846);
            int cls = static_cast<int>(rng.range(1, num_classes - 1));
            double ca = std::cos(angle), sa = std::sin(angle);

            auto inside = [&](int y, int x, double grow) {
                double dx = x - cx, dy = y - cy;
                double u = (dx * ca + dy * sa) / (rx + grow);
                double v = (-dx * sa + dy * ca) / (ry + grow);
                return u * u + v * v <= 1.0;
            };
            bool clear = true;
            for (int y = cy - margin; y <= cy + margin && clear; ++y)
                for (int x = cx - margin; x <= cx + margin && clear; ++x)
                    if (inside(y, x, 2.0) && gt.mask.label[static_cast<size_t>(y) * w + x] != 0) clear = false;
            if (!clear) continue;
            for (int y = cy - margin; y <= cy + margin; ++y)
                for (int x = cx - margin; x <= cx + margin; ++x)
                    if (inside(y, x, 0.0)) gt.mask.label[static_cast<size_t>(y) * w + x] = static_cast<uint8_t>(cls);
            break;
        }
    }

    gt.image.h = h;
    gt.image.w = w;
    gt.image.rgb.resize(static_cast<size_t>(h) * w * 3);
    for (size_t p = 0; p < static_cast<size_t>(h) * w; ++p) {
        std::array<uint8_t, 3> c = class_color(gt.mask.label[p], num_classes);
        for (int ch = 0; ch < 3; ++ch) {
            double v = c[static_cast<size_t>(ch)] / 255.0 + rng.normal(0.0, 0.1);
            v = std::clamp(v, 0.0, 1.0);
            gt.image.rgb[p * 3 + static_cast<size_t>(ch)] = static_cast<uint8_t>(std::lround(v * 255.0));
        }
    }
    return gt;
}

// ---------------------------------------------------------------------------
// Archetype application
// ---------------------------------------------------------------------------

namespace {

// Connected regions of annotated foreground (label not 0, not 255),
// class-agnostic so that a speckled region jitters as one unit.
// 4-connectivity, component ids in scan order of the first pixel.
std::vector<std::vector<int>> foreground_components(const ClassMap& m) {
    const int h = m.h, w = m.w;
    std::vector<int> comp(static_cast<size_t>(h) * w, -1);
    std::vector<std::vector<int>> comps;
    const int dy[4] = {-1, 0, 0, 1};
    const int dx[4] = {0, -1, 1, 0};
    for (int p0 = 0; p0 < h * w; ++p0) {
        uint8_t v = m.label[static_cast<size_t>(p0)];
        if (v == 0 || v == kIgnoreLabel || comp[static_cast<size_t>(p0)] >= 0) continue;
        int id = static_cast<int>(comps.size());
        comps.emplace_back();
        std::deque<int> queue{p0};
        comp[static_cast<size_t>(p0)] = id;
        while (!queue.empty()) {
            int p = queue.front();
            queue.pop_front();
            comps[static_cast<size_t>(id)].push_back(p);
            int y = p / w, x = p % w;
            for (int k = 0; k < 4; ++k) {
                int yy = y + dy[k], xx = x + dx[k];
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                int q = yy * w + xx;
                uint8_t qv = m.label[static_cast<size_t>(q)];
                if (qv == 0 || qv == kIgnoreLabel || comp[static_cast<size_t>(q)] >= 0) continue;
                comp[static_cast<size_t>(q)] = id;
                queue.push_back(q);
            }
        }
    }
    return comps;
}

void dilate_component(ClassMap& m, const std::vector<int>& pixels, int radius) {
    const int h = m.h, w = m.w;
    const int dy[4] = {-1, 0, 0, 1};
    const int dx[4] = {0, -1, 1, 0};
    std::vector<int> dist(static_cast<size_t>(h) * w, -1);
    std::deque<int> frontier;
    for (int p : pixels) {
        dist[static_cast<size_t>(p)] = 0;
        frontier.push_back(p);
    }
    while (!frontier.empty()) {
        int p = frontier.front();
        frontier.pop_front();
        int d = dist[static_cast<size_t>(p)];
        if (d >= radius) continue;
        int y = p / w, x = p % w;
        for (int k = 0; k < 4; ++k) {
            int yy = y + dy[k], xx = x + dx[k];
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            int q = yy * w + xx;
            if (dist[static_cast<size_t>(q)] >= 0) continue;
            if (m.label[static_cast<size_t>(q)] != 0) continue;  // only claim background
            dist[static_cast<size_t>(q)] = d + 1;
            m.label[static_cast<size_t>(q)] = m.label[static_cast<size_t>(p)];
            frontier.push_back(q);
        }
    }
}

void erode_component(ClassMap& m, const std::vector<int>& pixels, int radius) {
    const int h = m.h, w = m.w;
    const int dy[4] = {-1, 0, 0, 1};
    const int dx[4] = {0, -1, 1, 0};
    std::vector<uint8_t> in_comp(static_cast<size_t>(h) * w, 0);
    for (int p : pixels) in_comp[static_cast<size_t>(p)] = 1;
    // distance to the complement; pixels within `radius` of outside are removed
    std::vector<int> dist(static_cast<size_t>(h) * w, -1);
    std::deque<int> frontier;
    for (int p : pixels) {
        int y = p / w, x = p % w;
        bool boundary = y == 0 || y == h - 1 || x == 0 || x == w - 1;
        for (int k = 0; k < 4 && !boundary; ++k) {
            int yy = y + dy[k], xx = x + dx[k];
            if (!in_comp[static_cast<size_t>(yy) * w + xx]) boundary = true;
        }
        if (boundary) {
            dist[static_cast<size_t>(p)] = 1;
            frontier.push_back(p);
        }
    }
    while (!frontier.empty()) {
        int p = frontier.front();
        frontier.pop_front();
        int d = dist[static_cast<size_t>(p)];
        if (d >= radius) continue;
        int y = p / w, x = p % w;
        for (int k = 0; k < 4; ++k) {
            int yy = y + dy[k], xx = x + dx[k];
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
            int q = yy * w + xx;
            if (!in_comp[static_cast<size_t>(q)] || dist[static_cast<size_t>(q)] >= 0) continue;
            dist[static_cast<size_t>(q)] = d + 1;
            frontier.push_back(q);
        }
    }
    for (int p : pixels)
        if (dist[static_cast<size_t>(p)] >= 0) m.label[static_cast<size_t>(p)] = 0;
}

}  // namespace

ClassMap apply_archetype(const ClassMap& gold, const RaterArchetype& arch, Rng& rng, int num_classes) {
    ClassMap out = gold;
    const size_t npix = out.label.size();

    if (rng.coin(arch.p_apply)) {
        switch (arch.kind) {
            case RaterArchetype::Kind::Faithful:
                break;
            case RaterArchetype::Kind::Confuser:
                for (size_t p = 0; p < npix; ++p)
                    if (out.label[p] == arch.src_class && rng.coin(arch.prob))
                        out.label[p] = static_cast<uint8_t>(arch.dst_class);
                break;
            case RaterArchetype::Kind::UnderSegmenter: {
                auto comps = foreground_components(out);
                for (const auto& comp : comps)
                    if (rng.coin(arch.prob))
                        for (int p : comp) out.label[static_cast<size_t>(p)] = kIgnoreLabel;
                break;
            }
            case RaterArchetype::Kind::OverGrader:
                for (size_t p = 0; p < npix; ++p) {
                    uint8_t v = out.label[p];
                    if (v >= 1 && v != kIgnoreLabel && rng.coin(arch.prob))
                        out.label[p] = static_cast<uint8_t>(std::min<int>(v + 1, num_classes - 1));
                }
                break;
        }
    }

    if (arch.jitter_radius > 0) {
        auto comps = foreground_components(out);
        for (const auto& comp : comps) {
            bool dilate = rng.coin(0.5);
            int radius = static_cast<int>(rng.range(0, arch.jitter_radius));
            if (radius == 0) continue;
            if (dilate)
                dilate_component(out, comp, radius);
            else
                erode_component(out, comp, radius);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation and IO
// ---------------------------------------------------------------------------

namespace {

std::string image_id(int index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06d", index);
    return buf;
}

void write_meta(const std::string& dir, int num_classes, int num_raters) {
    std::ofstream out(dir + "/meta.txt");
    if (!out) throw DataError("cannot write " + dir + "/meta.txt");
    out << "num_classes = " << num_classes << "\n";
    out << "num_raters = " << num_raters << "\n";
    out << "class_names = ";
    for (int c = 0; c < num_classes; ++c) out << (c ? "," : "") << "class" << c;
    out << "\n";
}

}  // namespace

void gen_dataset(const GenConfig& cfg) {
    if (cfg.archetypes.empty()) throw UsageError("gen_dataset needs at least one rater archetype");
    if (cfg.train_count < 0 || cfg.test_count < 0 || cfg.size < 8)
        throw UsageError("gen_dataset counts/size out of range");
    const int m = static_cast<int>(cfg.archetypes.size());
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);

    std::vector<std::vector<int>> present_count(2, std::vector<int>(static_cast<size_t>(m), 0));
    const char* split_names[2] = {"train", "test"};
    int counts[2] = {cfg.train_count, cfg.test_count};

    for (int split = 0; split < 2; ++split) {
        std::string dir = cfg.out_dir + "/" + split_names[split];
        fs::create_directories(dir + "/images");
        fs::create_directories(dir + "/gold");
        for (int r = 0; r < m; ++r) fs::create_directories(dir + "/raters/" + std::to_string(r));
        write_meta(dir, cfg.num_classes, m);

        for (int i = 0; i < counts[split]; ++i) {
            int global = split == 0 ? i : cfg.train_count + i;
            uint64_t img_seed = derive_seed(cfg.seed, static_cast<uint64_t>(global));
            GroundTruth gt = gen_ground_truth(cfg.size, cfg.size, cfg.num_classes, cfg.shapes_per_image, img_seed);
            std::string id = image_id(i);
            save_ppm(dir + "/images/" + id + ".ppm", gt.image);
            save_pgm(dir + "/gold/" + id + ".pgm", gt.mask);
            for (int r = 0; r < m; ++r) {
                Rng cov_rng(derive_seed(cfg.seed ^ 0xC0FFEEULL, static_cast<uint64_t>(global) * 64 + r));
                if (!cov_rng.coin(cfg.coverage)) continue;
                Rng arng(derive_seed(img_seed, static_cast<uint64_t>(r) + 1));
                ClassMap mask = apply_archetype(gt.mask, cfg.archetypes[static_cast<size_t>(r)], arng, cfg.num_classes);
                save_pgm(dir + "/raters/" + std::to_string(r) + "/" + id + ".pgm", mask);
                present_count[static_cast<size_t>(split)][static_cast<size_t>(r)]++;
            }
        }
    }

    std::ofstream man(cfg.out_dir + "/manifest.txt");
    if (!man) throw DataError("cannot write " + cfg.out_dir + "/manifest.txt");
    man << "seed = " << cfg.seed << "\n";
    man << "size = " << cfg.size << "\n";
    man << "num_classes = " << cfg.num_classes << "\n";
    man << "shapes_per_image = " << cfg.shapes_per_image << "\n";
    man << "train = " << cfg.train_count << "\n";
    man << "test = " << cfg.test_count << "\n";
    man << "coverage = " << cfg.coverage << "\n";
    for (int r = 0; r < m; ++r)
        man << "rater." << r << " = " << cfg.archetypes[static_cast<size_t>(r)].to_string() << "\n";
    for (int split = 0; split < 2; ++split)
        for (int r = 0; r < m; ++r)
            man << "present." << split_names[split] << "." << r << " = "
                << present_count[static_cast<size_t>(split)][static_cast<size_t>(r)] << "\n";
}

MultiRaterDataset load_dataset(const std::string& dir) {
    if (!fs::exists(dir + "/meta.txt")) throw DataError("missing dataset meta file " + dir + "/meta.txt");
    MultiRaterDataset ds;
    {
        std::ifstream in(dir + "/meta.txt");
        std::string line;
        while (std::getline(in, line)) {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, eq);
            std::string val = line.substr(eq + 1);
            auto trim = [](std::string& s) {
                s.erase(0, s.find_first_not_of(" \t"));
                s.erase(s.find_last_not_of(" \t\r") + 1);
            };
            trim(key);
            trim(val);
            if (key == "num_classes") ds.meta.num_classes = std::stoi(val);
            else if (key == "num_raters") ds.meta.num_raters = std::stoi(val);
            else if (key == "class_names") {
                std::stringstream ss(val);
                std::string name;
                while (std::getline(ss, name, ',')) ds.meta.class_names.push_back(name);
            }
        }
    }
    if (ds.meta.num_classes < 2 || ds.meta.num_raters < 1)
        throw DataError("invalid meta in " + dir + "/meta.txt");

    std::vector<std::string> ids;
    if (!fs::exists(dir + "/images")) throw DataError("missing images directory in " + dir);
    for (const auto& entry : fs::directory_iterator(dir + "/images")) {
        if (entry.path().extension() == ".ppm") ids.push_back(entry.path().stem().string());
    }
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw DataError("dataset " + dir + " has no images");

    auto check_mask = [&](const ClassMap& m, const RgbImage& img, const std::string& path) {
        if (m.h != img.h || m.w != img.w)
            throw DataError("mask dimensions " + std::to_string(m.w) + "x" + std::to_string(m.h) +
                            " do not match image in " + path);
        for (uint8_t v : m.label)
            if (v != kIgnoreLabel && v >= ds.meta.num_classes)
                throw DataError("class id " + std::to_string(int(v)) + " >= num_classes in " + path);
    };

    for (const std::string& id : ids) {
        RgbImage img = load_ppm(dir + "/images/" + id + ".ppm");
        ds.ids.push_back(id);
        ds.images.push_back(std::move(img));
        ds.rater_mask.emplace_back(static_cast<size_t>(ds.meta.num_raters), -1);
        ds.gold_mask.push_back(-1);
        int img_idx = ds.num_images() - 1;
        for (int r = 0; r < ds.meta.num_raters; ++r) {
            std::string path = dir + "/raters/" + std::to_string(r) + "/" + id + ".pgm";
            if (!fs::exists(path)) continue;  // unannotated
            ClassMap m = load_pgm(path);
            check_mask(m, ds.images.back(), path);
            ds.rater_mask[static_cast<size_t>(img_idx)][static_cast<size_t>(r)] = static_cast<int>(ds.masks.size());
            ds.masks.push_back(std::move(m));
        }
        std::string gold_path = dir + "/gold/" + id + ".pgm";
        if (fs::exists(gold_path)) {
            ClassMap m = load_pgm(gold_path);
            check_mask(m, ds.images.back(), gold_path);
            ds.gold_mask[static_cast<size_t>(img_idx)] = static_cast<int>(ds.masks.size());
            ds.masks.push_back(std::move(m));
        }
    }
    return ds;
}

Tensor image_to_tensor(const RgbImage& img) {
    Tensor t({3, img.h, img.w});
    size_t hw = static_cast<size_t>(img.h) * img.w;
    for (size_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
            t.data[static_cast<size_t>(c) * hw + p] = static_cast<float>(img.rgb[p * 3 + static_cast<size_t>(c)]) / 255.0f;
    return t;
}

namespace {

template <typename Get, typename Set>
void apply_d4_generic(int h, int w, int code, Get get, Set set) {
    bool hflip = code & 1, vflip = code & 2, transpose = code & 4;
    int oh = transpose ? w : h, ow = transpose ? h : w;
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            int sy = transpose ? x : y;
            int sx = transpose ? y : x;
            if (hflip) sx = w - 1 - sx;
            if (vflip) sy = h - 1 - sy;
            set(y, x, get(sy, sx));
        }
}

}  // namespace

void apply_d4_image(Tensor& chw, int code) {
    if (code == 0) return;
    if (chw.ndim() != 3) throw ShapeError("apply_d4_image expects [C,H,W], got " + shape_str(chw.shape));
    int c = chw.shape[0], h = chw.shape[1], w = chw.shape[2];
    if ((code & 4) && h != w) throw ShapeError("transpose augmentation needs square images");
    Tensor src = chw;
    size_t hw = static_cast<size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch)
        apply_d4_generic(h, w, code,
                         [&](int y, int x) { return src.data[static_cast<size_t>(ch) * hw + static_cast<size_t>(y) * w + x]; },
                         [&](int y, int x, float v) { chw.data[static_cast<size_t>(ch) * hw + static_cast<size_t>(y) * w + x] = v; });
}

void apply_d4_mask(ClassMap& mask, int code) {
    if (code == 0) return;
    if ((code & 4) && mask.h != mask.w) throw ShapeError("transpose augmentation needs square masks");
    ClassMap src = mask;
    apply_d4_generic(mask.h, mask.w, code,
                     [&](int y, int x) { return src.label[static_cast<size_t>(y) * src.w + x]; },
                     [&](int y, int x, uint8_t v) { mask.label[static_cast<size_t>(y) * mask.w + x] = v; });
}

}  // namespace pionono
