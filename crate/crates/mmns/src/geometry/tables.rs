//! Quadrature node/weight tables.
//!
//! Generated by tools/gen_quadrature.py; do not edit by hand.
//! Triangle rules are n x n Gauss-Legendre x Gauss-Jacobi conical
//! products on the reference triangle (0,0)-(1,0)-(0,1), exact for
//! total degree <= 2n-1 with strictly positive weights; segment rules
//! are Gauss-Legendre on [0,1].

pub const MAX_TRIANGLE_DEGREE: usize = 10;
pub const MAX_SEGMENT_DEGREE: usize = 15;

const TRI_1: [[f64; 3]; 1] = [
    [0.33333333333333333, 0.33333333333333333, 0.50000000000000000],
];

const TRI_2: [[f64; 3]; 4] = [
    [0.17855872826361642, 0.15505102572168219, 0.15902069087198858],
    [0.66639024601470139, 0.15505102572168219, 0.15902069087198858],
    [0.075031110222608118, 0.64494897427831781, 0.090979309128011415],
    [0.28001991549907407, 0.64494897427831781, 0.090979309128011415],
];

const TRI_3: [[f64; 3]; 9] = [
    [0.10271765480962627, 0.088587959512703947, 0.055814420483044342],
    [0.45570602024364803, 0.088587959512703947, 0.089303072772870947],
    [0.80869438567766978, 0.088587959512703947, 0.055814420483044342],
    [0.066554067839164504, 0.40946686444073471, 0.063678085099885069],
    [0.29526656777963264, 0.40946686444073471, 0.10188493615981611],
    [0.52397906772010079, 0.40946686444073471, 0.063678085099885069],
    [0.023931132287080619, 0.78765946176084706, 0.019396383305959478],
    [0.10617026911957647, 0.78765946176084706, 0.031034213289535166],
    [0.18840940595207233, 0.78765946176084706, 0.019396383305959478],
];

const TRI_4: [[f64; 3]; 16] = [
    [0.065466994555014464, 0.057104196114517682, 0.023568368193382332],
    [0.31116455224435703, 0.057104196114517682, 0.044185088522361726],
    [0.63173125164112528, 0.057104196114517682, 0.044185088522361726],
    [0.87742880933046785, 0.057104196114517682, 0.023568368193382332],
    [0.050210123211369772, 0.27684301363812383, 0.035388067898085946],
    [0.23864865973144292, 0.27684301363812383, 0.066344216107049734],
    [0.48450832663043325, 0.27684301363812383, 0.066344216107049734],
    [0.67294686315050640, 0.27684301363812383, 0.035388067898085946],
    [0.028912084224389013, 0.58359043236891682, 0.022584049282369931],
    [0.13741910413457437, 0.58359043236891682, 0.042339724521746289],
    [0.27899046349650881, 0.58359043236891682, 0.042339724521746289],
    [0.38749748340669417, 0.58359043236891682, 0.022584049282369931],
    [0.0097037851269461122, 0.86024013565621945, 0.0054232259105252545],
    [0.046122079906452049, 0.86024013565621945, 0.010167259564478787],
    [0.093637784437328504, 0.86024013565621945, 0.010167259564478787],
    [0.13005607921683444, 0.86024013565621945, 0.0054232259105252545],
];

const TRI_5: [[f64; 3]; 25] = [
    [0.045042593569803723, 0.039809857051468742, 0.011465080351592548],
    [0.22157860955237920, 0.039809857051468742, 0.023161221929498386],
    [0.48009507147426563, 0.039809857051468742, 0.027528985664469811],
    [0.73861153339615206, 0.039809857051468742, 0.023161221929498386],
    [0.91514754937872753, 0.039809857051468742, 0.011465080351592548],
    [0.037621252345111192, 0.19801341787360817, 0.019804083132047354],
    [0.18507071026738943, 0.19801341787360817, 0.040007287386160424],
    [0.40099329106319591, 0.19801341787360817, 0.047551897057954010],
    [0.61691587185900239, 0.19801341787360817, 0.040007287386160424],
    [0.76436532978128064, 0.19801341787360817, 0.019804083132047354],
    [0.026364644944470917, 0.43797481024738614, 0.017341506431365700],
    [0.12969593678225412, 0.43797481024738614, 0.035032504503371720],
    [0.28101259487630693, 0.43797481024738614, 0.041638965215194968],
    [0.43232925297035973, 0.43797481024738614, 0.035032504503371720],
    [0.53566054480814294, 0.43797481024738614, 0.017341506431365700],
    [0.014285794395571385, 0.69546427335363609, 0.0087554991821638317],
    [0.070276292008281721, 0.69546427335363609, 0.017687452110483466],
    [0.15226786332318195, 0.69546427335363609, 0.021022967487322075],
    [0.23425943463808218, 0.69546427335363609, 0.017687452110483466],
    [0.29024993225079252, 0.69546427335363609, 0.0087554991821638317],
    [0.0046222884650464285, 0.90146491420117357, 0.0018655521668778384],
    [0.022738483063764035, 0.90146491420117357, 0.0037687016953276204],
    [0.049267542899413213, 0.90146491420117357, 0.0044794067972813586],
    [0.075796602735062392, 0.90146491420117357, 0.0037687016953276204],
    [0.093912797333779998, 0.90146491420117357, 0.0018655521668778384],
];

const TRI_6: [[f64; 3]; 36] = [
    [0.032775366614459895, 0.029316427159784892, 0.0061942653526588499],
    [0.16442924159482745, 0.029316427159784892, 0.013043394330082831],
    [0.36952992437237670, 0.029316427159784892, 0.016917505680012661],
    [0.60115364846783841, 0.029316427159784892, 0.016917505680012661],
    [0.80625433124538766, 0.029316427159784892, 0.013043394330082831],
    [0.93790820622575521, 0.029316427159784892, 0.0061942653526588499],
    [0.028765333012559128, 0.14807859966848429, 0.011610874766997514],
    [0.14431148695041665, 0.14807859966848429, 0.024449262258057814],
    [0.32431830458877604, 0.14807859966848429, 0.031711111590703980],
    [0.52760309574273967, 0.14807859966848429, 0.031711111590703980],
    [0.70760991338109906, 0.14807859966848429, 0.024449262258057814],
    [0.82315606731895658, 0.14807859966848429, 0.011610874766997514],
    [0.022386872978030634, 0.33698469028115430, 0.012060606404265109],
    [0.11231168178095370, 0.33698469028115430, 0.025396271589047656],
    [0.25240356807651801, 0.33698469028115430, 0.032939398900786699],
    [0.41061174164232769, 0.33698469028115430, 0.032939398900786699],
    [0.55070362793789201, 0.33698469028115430, 0.025396271589047656],
    [0.64062843674081507, 0.33698469028115430, 0.012060606404265109],
    [0.014901563366671160, 0.55867151877155013, 0.0084515357969431216],
    [0.074758973462649098, 0.55867151877155013, 0.017796575997026277],
    [0.16800951912119186, 0.55867151877155013, 0.023082463651358233],
    [0.27331896210725801, 0.55867151877155013, 0.023082463651358233],
    [0.36656950776580077, 0.55867151877155013, 0.017796575997026277],
    [0.42642691786177871, 0.55867151877155013, 0.0084515357969431216],
    [0.0077918747012864320, 0.76923386203005450, 0.0037652982126916729],
    [0.039090700732824244, 0.76923386203005450, 0.0079286673337964847],
    [0.087850454975997191, 0.76923386203005450, 0.010283617228766330],
    [0.14291568299394831, 0.76923386203005450, 0.010283617228766330],
    [0.19167543723712126, 0.76923386203005450, 0.0079286673337964847],
    [0.22297426326865907, 0.76923386203005450, 0.0037652982126916729],
    [0.0024666971526702431, 0.92694567131974111, 0.00074854256123631831],
    [0.012375060417440038, 0.92694567131974111, 0.0015762217540235886],
    [0.027811082115360581, 0.92694567131974111, 0.0020443865915448590],
    [0.045243246564898304, 0.92694567131974111, 0.0020443865915448590],
    [0.060679268262818847, 0.92694567131974111, 0.0015762217540235886],
    [0.070587631527588642, 0.92694567131974111, 0.00074854256123631831],
];

const SEG_1: [[f64; 2]; 1] = [
    [0.50000000000000000, 1.0000000000000000],
];

const SEG_2: [[f64; 2]; 2] = [
    [0.21132486540518712, 0.50000000000000000],
    [0.78867513459481288, 0.50000000000000000],
];

const SEG_3: [[f64; 2]; 3] = [
    [0.11270166537925831, 0.27777777777777778],
    [0.50000000000000000, 0.44444444444444444],
    [0.88729833462074169, 0.27777777777777778],
];

const SEG_4: [[f64; 2]; 4] = [
    [0.069431844202973712, 0.17392742256872693],
    [0.33000947820757187, 0.32607257743127307],
    [0.66999052179242813, 0.32607257743127307],
    [0.93056815579702629, 0.17392742256872693],
];

const SEG_5: [[f64; 2]; 5] = [
    [0.046910077030668004, 0.11846344252809454],
    [0.23076534494715845, 0.23931433524968323],
    [0.50000000000000000, 0.28444444444444444],
    [0.76923465505284155, 0.23931433524968323],
    [0.95308992296933200, 0.11846344252809454],
];

const SEG_6: [[f64; 2]; 6] = [
    [0.033765242898423986, 0.085662246189585173],
    [0.16939530676686774, 0.18038078652406930],
    [0.38069040695840155, 0.23395696728634552],
    [0.61930959304159845, 0.23395696728634552],
    [0.83060469323313226, 0.18038078652406930],
    [0.96623475710157601, 0.085662246189585173],
];

const SEG_7: [[f64; 2]; 7] = [
    [0.025446043828620738, 0.064742483084434847],
    [0.12923440720030278, 0.13985269574463833],
    [0.29707742431130142, 0.19091502525255947],
    [0.50000000000000000, 0.20897959183673469],
    [0.70292257568869858, 0.19091502525255947],
    [0.87076559279969722, 0.13985269574463833],
    [0.97455395617137926, 0.064742483084434847],
];

const SEG_8: [[f64; 2]; 8] = [
    [0.019855071751231884, 0.050614268145188130],
    [0.10166676129318663, 0.11119051722668724],
    [0.23723379504183551, 0.15685332293894364],
    [0.40828267875217510, 0.18134189168918099],
    [0.59171732124782490, 0.18134189168918099],
    [0.76276620495816449, 0.15685332293894364],
    [0.89833323870681337, 0.11119051722668724],
    [0.98014492824876812, 0.050614268145188130],
];

/// Reference-triangle rule exact for the given total degree.
pub fn triangle_rule(degree: usize) -> &'static [[f64; 3]] {
    assert!(degree >= 1 && degree <= MAX_TRIANGLE_DEGREE, "unsupported triangle quadrature degree {degree}");
    match (degree + 2) / 2 {
        1 => &TRI_1,
        2 => &TRI_2,
        3 => &TRI_3,
        4 => &TRI_4,
        5 => &TRI_5,
        6 => &TRI_6,
        _ => unreachable!(),
    }
}

/// Gauss-Legendre rule on [0,1] exact for the given degree.
pub fn segment_rule(degree: usize) -> &'static [[f64; 2]] {
    assert!(degree >= 1 && degree <= MAX_SEGMENT_DEGREE, "unsupported segment quadrature degree {degree}");
    match (degree + 2) / 2 {
        1 => &SEG_1,
        2 => &SEG_2,
        3 => &SEG_3,
        4 => &SEG_4,
        5 => &SEG_5,
        6 => &SEG_6,
        7 => &SEG_7,
        8 => &SEG_8,
        _ => unreachable!(),
    }
}
